"""Acceptance suite: every exit criterion at its stated tolerance, on the
canonical configuration F(v) = e^v - 5v - 2, v_r = 1, w_b = 2.5,
lambda(v) = e^{v+2}.  One PASS/FAIL line per criterion is printed and
repeated in the terminal summary."""

import json
import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from conftest import record_acceptance
from mkv_neuro import _core
from mkv_neuro.cli import run as cli_run
from mkv_neuro.dynamics import RegionId, classify, integrate
from mkv_neuro.hazard import sample_batch
from mkv_neuro.meanfield import _ResidualPipeline, continuation_in_J
from mkv_neuro.model import State, fig2_model
from mkv_neuro.network import population_rate, simulate_network
from mkv_neuro.pdmp import (estimate_lambda_curve, simulate_embedded_chain,
                            simulate_linear, solve_rate_volterra)
from mkv_neuro.stationary import (build_kernel, estimate_doeblin,
                                  expected_t1, invariant_density, kernel_row,
                                  lift_to_plane, mean_jump_time,
                                  tail_exponent, tv_decay, verify_lyapunov)

SEED = 20260810
SPAN = 90.0


@pytest.fixture(scope="module")
def kernel2000(fig2, fig2_part):
    return build_kernel(fig2, fig2_part, n_w=2000,
                        w_max=fig2_part.w_star + SPAN)


@pytest.fixture(scope="module")
def mu_w(kernel2000):
    return invariant_density(kernel2000)


@pytest.fixture(scope="module")
def twenty_starts(fig2, fig2_part):
    """20 states spanning P2, P3 and P4."""
    part = fig2_part
    starts = []
    for w in np.linspace(part.w23 + 0.5, part.w23 + 25.0, 8):
        starts.append(State(fig2.v_r, float(w)))           # P2
    for v in np.linspace(part.w_star + 0.5, part.v34 - 0.3, 6):
        starts.append(State(float(v), part.w23 - 1.5))     # P3
    for v in np.linspace(part.v34 + 0.2, part.v34 + 4.0, 6):
        starts.append(State(float(v), part.w23 - 2.0))     # P4
    regions = {classify(fig2, part, s) for s in starts}
    assert {RegionId.P2, RegionId.P3, RegionId.P4} <= regions
    return starts


def test_criterion_01_jump_before_explosion(fig2, fig2_part, twenty_starts):
    n_per = 5000
    batch = sample_batch(fig2, twenty_starts, n_per, seed=SEED, tag="acc1")
    bad = 0
    for k, s in enumerate(twenty_starts):
        traj = integrate(fig2, fig2_part, s, t_span=(0.0, 200.0))
        t_inf = traj.blow_up if traj.blow_up is not None else math.inf
        T1 = batch["T1"][batch["start_index"] == k]
        bad += int(np.sum(T1 >= t_inf))
    ok = bad == 0
    record_acceptance(1, "jump-before-explosion", ok,
                      f"{bad} of {20 * n_per} late samples")
    assert ok


def _ks(a, b):
    a = np.sort(a)
    b = np.sort(b)
    grid = np.concatenate([a, b])
    Fa = np.searchsorted(a, grid, side="right") / a.size
    Fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(Fa - Fb)))


def test_criterion_02_sampler_oracle_agreement(fig2, fig2_part, ctrl):
    n = 100_000
    worst = 0.0
    for j, x in enumerate([State(fig2.v_r, 6.0), State(0.0, 1.0),
                           State(fig2.v_r, fig2_part.w23 + 4.0)]):
        tc = sample_batch(fig2, [x], n, seed=SEED + j, tag="acc2/tc")["T1"]

        # thinning oracle
        p = fig2.compile()
        v0 = np.full(n, x.v)
        w0 = np.full(n, x.w)
        T1 = np.empty(n)
        vp = np.empty(n)
        wp = np.empty(n)
        stt = np.empty(n, dtype=np.int64)
        prop = np.empty(n, dtype=np.int64)
        acc = np.empty(n, dtype=np.int64)
        from mkv_neuro.rng import derive_key
        _core.batch_thinning(
            v0, w0, np.uint64(derive_key(SEED + j, "acc2/thin", 0)), p, 0.0,
            np.zeros(0), np.zeros(0), ctrl.rel_tol, ctrl.abs_tol,
            ctrl.v_switch_for(fig2), ctrl.v_explode, 1e3, T1, vp, wp, stt,
            prop, acc)
        assert np.all(stt == _core.JUMPED)

        # quadrature-inverted CDF of the first-jump density, built on an
        # independent integrator (scipy), inverted at uniform draws
        def rhs(t, y):
            return [fig2.F(y[0]) - y[1] + fig2.I, y[0] - y[1],
                    float(fig2.lam(y[0]))]

        def hit(t, y):
            return y[0] - 30.0
        hit.terminal = True

        sol = solve_ivp(rhs, (0.0, 400.0), [x.v, x.w, 0.0], rtol=1e-11,
                        atol=1e-12, dense_output=True, events=[hit])
        t_hi = float(sol.t[-1])
        ts = np.linspace(0.0, t_hi, 40_001)
        lam_cum = sol.sol(ts)[2]
        if sol.t_events[0].size:
            # remaining hazard on the explosive leg, parametrized by v
            w_end = float(sol.y[1][-1])
            lam_end = float(sol.y[2][-1])

            def rhs_v(v, y):
                d = fig2.F(v) - y[0] + fig2.I
                return [(v - y[0]) / d, float(fig2.lam(v)) / d, 1.0 / d]

            solv = solve_ivp(rhs_v, (30.0, 1e6), [w_end, lam_end, t_hi],
                             rtol=1e-11, atol=1e-12, dense_output=True)
            vs = np.linspace(30.0, min(200.0, solv.t[-1]), 20_001)
            lam_v = solv.sol(vs)[1]
            t_v = solv.sol(vs)[2]
            ts = np.concatenate([ts, t_v[1:]])
            lam_cum = np.concatenate([lam_cum, lam_v[1:]])
        from mkv_neuro.rng import uniforms
        u = uniforms(derive_key(SEED + j, "acc2/cdf", 0), 0, n)
        draws = -np.log(u)
        inv = np.interp(draws, lam_cum, ts, right=float(ts[-1]))

        ks_ab = _ks(tc, T1)
        ks_ac = _ks(tc, inv)
        ks_bc = _ks(T1, inv)
        worst = max(worst, ks_ab, ks_ac, ks_bc)
    ok = worst < 0.01
    record_acceptance(2, "sampler agreement", ok, f"worst KS {worst:.4f}")
    assert ok


def test_criterion_03_kernel_rows(fig2, fig2_part, kernel2000):
    K = kernel2000
    idx = np.linspace(0, K.rows.shape[0] - 1, 50).astype(int)
    sums = K.rows[idx].sum(axis=1) + K.leak_low[idx] + K.leak_high[idx]
    ok_mass = bool(np.all(np.abs(sums - 1.0) < 1e-6))
    nodes = K.nodes
    ok_zero = True
    for i in np.nonzero(nodes > K.structural_threshold)[0][::25]:
        above = nodes > nodes[i] + K.width
        if float(K.rows[i, above].sum()) != 0.0:
            ok_zero = False
    ok = ok_mass and ok_zero
    record_acceptance(3, "kernel row-stochasticity", ok,
                      f"max row defect {np.abs(sums - 1).max():.2e}, "
                      f"structural zeros {'ok' if ok_zero else 'violated'}")
    assert ok


def test_criterion_04_invariant_density_cross_validation(
        fig2, fig2_part, kernel2000, mu_w):
    n_steps = 1_000_000
    rec = simulate_embedded_chain(fig2, fig2_part, 6.0, n_steps,
                                  rng=(SEED, "acc4", 0))
    burn = 5000
    bins = np.linspace(fig2_part.w_star, fig2_part.w_star + SPAN, 201)
    hist = np.histogram(rec.w[burn:], bins=bins)[0] / (n_steps - burn)
    # aggregate the 2000-cell density onto the same comparison bins
    agg = np.histogram(mu_w.w, bins=bins, weights=mu_w.masses)[0]
    l1 = float(np.abs(hist - agg).sum())
    ok = l1 < 0.05
    record_acceptance(4, "invariant density vs chain", ok, f"L1 {l1:.4f}")
    assert ok


def test_criterion_05_firing_rate_identity(fig2, fig2_part, kernel2000,
                                           mu_w):
    lift = lift_to_plane(fig2, fig2_part, mu_w,
                         (-7.0, 8.0, 301, -10.0, 30.0, 401))
    dv, dw = lift["cell"]
    lam_grid = np.asarray(fig2.lam(lift["v"]))[:, None]
    mean_lam = float((lift["density"] * lam_grid).sum() * dv * dw)
    e_t1 = expected_t1(fig2, kernel2000, mu_w)
    defect = abs(mean_lam * e_t1 - 1.0)
    ok = defect < 0.02
    record_acceptance(5, "firing-rate identity", ok,
                      f"|mu(lambda) E T1 - 1| = {defect:.4f}")
    assert ok


def test_criterion_06_lyapunov_certificate(fig2, fig2_part, kernel2000,
                                           mu_w):
    cert = verify_lyapunov(fig2, fig2_part, kernel2000,
                           np.geomspace(1e-3, 1.0, 20))
    tail = tail_exponent(mu_w)
    slope = tail.parameters["slope"]
    r = cert.parameters["r"] if cert.verdict else math.nan
    consistent = cert.verdict and tail.verdict and \
        slope <= -r + 0.25 * abs(slope)
    record_acceptance(6, "Lyapunov certificate", consistent,
                      f"r={r:.3f} gamma={cert.parameters.get('gamma_L', 1):.3f} "
                      f"tail slope {slope:.3f} R2 "
                      f"{tail.parameters['r_squared']:.3f}")
    assert consistent


def test_criterion_07_geometric_tv_decay(fig2, fig2_part):
    cert = tv_decay(fig2, fig2_part,
                    (fig2_part.w_star + 0.5, fig2_part.w_star + 30.0),
                    n_steps=50, n_paths=100_000, seed=SEED)
    ok = cert.verdict
    record_acceptance(7, "geometric TV decay", ok,
                      f"ratio {cert.parameters['ratio']:.3f} "
                      f"ci {tuple(round(c, 3) for c in cert.parameters['ci95'])}")
    assert ok


def test_criterion_08_mean_jump_time_bound(fig2, fig2_part):
    w23 = fig2_part.w23
    grid = np.linspace(w23, w23 + 60.0, 200)
    T = np.array([mean_jump_time(fig2, fig2_part, w) for w in grid])
    logs = np.log((grid - fig2.v_r) / (w23 - fig2.v_r))
    fit_zone = grid <= w23 + 30.0
    M = float(np.max(T[fit_zone] - logs[fit_zone]))
    defect = float(np.max(T - logs - M))
    ok = defect <= 1e-9
    record_acceptance(8, "mean-jump-time bound", ok,
                      f"M={M:.4f}, worst defect {defect:.2e}")
    assert ok


def test_criterion_09_volterra_vs_monte_carlo(fig2, fig2_part):
    x = State(fig2.v_r, 6.0)
    fine = np.linspace(0.0, 2.0, 481)
    sol = solve_rate_volterra(fig2, fig2_part, x, 0.0, fine, n_lattice=140)
    sub = np.arange(0, 481, 5)[1:]  # a 96-node comparison grid
    mc = estimate_lambda_curve(fig2, x, fine[sub], 100_000, seed=SEED)
    z = np.abs(sol.r_of_t()[sub] - mc["mean_lambda"]) / mc["stderr"]
    worst = float(z.max())
    ok = worst <= 3.0
    record_acceptance(9, "Volterra vs Monte Carlo", ok,
                      f"worst |z| = {worst:.2f} over {sub.size} nodes")
    assert ok


@pytest.fixture(scope="module")
def continuation(fig2):
    J_grid = np.linspace(0.0, 2.0, 9)
    return continuation_in_J(fig2, J_grid, n_w=500)


def test_criterion_10_fixed_point_closure(fig2, fig2_part, continuation):
    results = continuation
    ok_curve = all(r.converged for r in results)
    kappas = [r.kappa for r in results]
    ok_curve &= kappas[0] == 0.0
    ok_curve &= all(b > a for a, b in zip(kappas, kappas[1:]))
    worst = 0.0
    for r in results:
        if r.J == 0.0 or not r.converged:
            continue
        path = simulate_linear(fig2, fig2_part, State(fig2.v_r, 6.0),
                               kappa=r.kappa, horizon=1500.0,
                               rng=(SEED, "acc10", int(r.J * 1000)))
        S = path.record.S[200:]
        S = S[:S.size // 25 * 25]
        blocks = S.reshape(25, -1).sum(axis=1)
        rate = S.size / S.sum()
        rate_se = rate * blocks.std() / blocks.mean() / math.sqrt(blocks.size)
        z = abs(r.J * rate - r.kappa) / (3.0 * r.J * rate_se)
        worst = max(worst, z)
    ok = ok_curve and worst <= 1.0
    record_acceptance(10, "fixed-point closure", ok,
                      f"curve through origin, increasing: {ok_curve}; "
                      f"worst closure z/3sigma = {worst:.2f}")
    assert ok


def test_criterion_11_network_meanfield_soft(fig2, fig2_part, continuation):
    J = 1.0
    match = [r for r in continuation if abs(r.J - J) < 1e-9][0]
    target = 1.0 / match.E_T1
    m = fig2_model(J=J, D=1.0)
    raster, state = simulate_network(
        m, fig2_part, N=1000, mu0={"kind": "point", "v": 1.0, "w": 5.0},
        horizon=500.0, seed=SEED)
    burn = 50.0
    n_late = int(np.sum(raster.t >= burn))
    rate = n_late / (1000 * (500.0 - burn))
    dev = abs(rate - target) / target
    ok = dev < 0.10
    # soft criterion: the deviation is documented, not gated
    record_acceptance(11, "network vs mean-field (soft)", ok,
                      f"rate {rate:.4f} vs 1/E T1(kappa*) {target:.4f}, "
                      f"deviation {100 * dev:.2f}% (documented)")
    assert rate > 0


def test_criterion_12_w_increment_bound(fig2, fig2_part):
    from mkv_neuro.dynamics import w_increment_bound

    C = w_increment_bound(fig2, fig2_part)
    starts = [State(fig2.v_r, w)
              for w in np.linspace(fig2_part.w_star, fig2_part.w_star + 50.0,
                                   10_000)]
    batch = sample_batch(fig2, starts, 1, seed=SEED, tag="acc12")
    w0s = np.array([s.w for s in starts])
    defect = float(np.max(batch["w_max"] - (C + w0s)))
    ok = defect <= 1e-8
    record_acceptance(12, "w-increment bound", ok,
                      f"C={C:.3f}, worst defect {defect:.2e}")
    assert ok


def test_criterion_13_thread_determinism(fig2, tmp_path):
    cfgdoc = {
        "model": json.loads(fig2_model(J=0.5, D=1.0).to_json()),
        "seed": SEED,
        "simulate": {"w0": 6.0, "horizon": 40.0, "n_samples": 200},
        "network": {"N": 24, "horizon": 30.0, "bin": 1.0},
        "mkv": {"horizon": 4.0, "M": 400},
    }
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(cfgdoc))
    ok = True
    details = []
    for command, files in (("simulate-linear", ["jumps.csv", "samples.csv"]),
                           ("simulate-network", ["raster.csv", "rate.csv"]),
                           ("simulate-mkv", ["mkv_path.csv"])):
        outs = []
        for threads in (1, 8):
            out = tmp_path / f"{command}-{threads}"
            code = cli_run([command, "--config", str(cfg), "--output-dir",
                            str(out), "--threads", str(threads)])
            assert code == 0
            outs.append({f: (out / f).read_bytes() for f in files})
        same = all(outs[0][f] == outs[1][f] for f in files)
        ok &= same
        details.append(f"{command}:{'=' if same else '!='}")
    record_acceptance(13, "thread-count determinism", ok, " ".join(details))
    assert ok
