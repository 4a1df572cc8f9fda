import math

import numpy as np
import pytest

from mkv_neuro.model import State, fig2_model
from mkv_neuro.pdmp import (JumpRecord, estimate_lambda_curve,
                            simulate_embedded_chain, simulate_linear,
                            solve_rate_volterra)


def test_linear_path_structure(fig2, fig2_part):
    path = simulate_linear(fig2, fig2_part, State(fig2.v_r, 6.0),
                           horizon=50.0, rng=(21, "lin", 0))
    rec = path.record
    assert len(rec) > 20
    assert np.all(rec.S > 0)
    assert np.all(np.diff(rec.T) > 0)
    # post-jump adaptation is the pre-jump one raised by w_b
    assert np.allclose(rec.w, rec.w_pre + fig2.w_b)
    # chain stays in E_w
    assert np.all(rec.w_pre >= fig2_part.w_star - 1e-9)


def test_linear_path_deterministic_replay(fig2, fig2_part):
    a = simulate_linear(fig2, fig2_part, State(fig2.v_r, 6.0), horizon=20.0,
                        rng=(33, "lin", 1))
    b = simulate_linear(fig2, fig2_part, State(fig2.v_r, 6.0), horizon=20.0,
                        rng=(33, "lin", 1))
    assert np.array_equal(a.record.T, b.record.T)
    assert np.array_equal(a.record.w, b.record.w)


def test_linear_path_dense_query(fig2, fig2_part):
    path = simulate_linear(fig2, fig2_part, State(fig2.v_r, 6.0),
                           horizon=10.0, rng=(21, "lin", 2))
    rec = path.record
    t_mid = 0.5 * (rec.T[0] + rec.T[1])
    s = path.state(t_mid)
    assert np.isfinite(s.v) and np.isfinite(s.w)
    # immediately after a jump the state is the reset of the pre-jump one
    s_post = path.state(rec.T[0] + 1e-9)
    assert s_post.v == pytest.approx(fig2.v_r, abs=1e-4)
    assert s_post.w == pytest.approx(rec.w[0], abs=1e-4)


def test_chain_matches_linear_in_law(fig2, fig2_part):
    # the embedded chain is the jump skeleton of the path simulation
    n = 4000
    rec = simulate_embedded_chain(fig2, fig2_part, 6.0, n, rng=(5, "ch", 0))
    path = simulate_linear(fig2, fig2_part, State(fig2.v_r, 6.0),
                           horizon=1000.0, rng=(5, "lin", 3))
    wa = rec.w[200:]
    wb = path.record.w[200:]
    qa = np.quantile(wa, [0.1, 0.25, 0.5, 0.75, 0.9])
    qb = np.quantile(wb, [0.1, 0.25, 0.5, 0.75, 0.9])
    assert np.all(np.abs(qa - qb) < 0.6)


def test_chain_long_run_rate_consistency(fig2, fig2_part):
    # long-run jump count per unit time approaches 1 / E(S)
    n = 50_000
    rec = simulate_embedded_chain(fig2, fig2_part, 6.0, n, rng=(6, "ch", 1))
    total = float(rec.T[-1])
    rate = n / total
    mean_s = float(np.mean(rec.S))
    assert rate == pytest.approx(1.0 / mean_s, rel=1e-9)
    # crude stderr window for the stationary mean
    blocks = rec.S[1000:].reshape(49, -1).mean(axis=1)
    se = blocks.std() / math.sqrt(blocks.size)
    assert abs(mean_s - blocks.mean()) < 4 * se + 1e-3


def test_two_chain_coupling_in_distribution(fig2, fig2_part):
    n = 100_000
    burn = 1000
    ra = simulate_embedded_chain(fig2, fig2_part, fig2_part.w_star + 0.2, n,
                                 rng=(17, "ch", 2))
    rb = simulate_embedded_chain(fig2, fig2_part, fig2_part.w_star + 30.0, n,
                                 rng=(18, "ch", 3))
    edges = np.linspace(fig2_part.w_star, fig2_part.w_star + 40.0, 60)
    ha = np.histogram(ra.w[burn:], bins=edges)[0] / (n - burn)
    hb = np.histogram(rb.w[burn:], bins=edges)[0] / (n - burn)
    assert float(np.abs(ha - hb).sum()) < 0.02


def test_mc_lambda_curve_thread_invariance(fig2, fig2_part):
    t_grid = np.linspace(0.2, 2.0, 7)
    a = estimate_lambda_curve(fig2, State(fig2.v_r, 6.0), t_grid, 500,
                              seed=9, threads=1)
    b = estimate_lambda_curve(fig2, State(fig2.v_r, 6.0), t_grid, 500,
                              seed=9, threads=8)
    assert np.array_equal(a["mean_lambda"], b["mean_lambda"])


# -- Volterra ------------------------------------------------------------------


@pytest.fixture(scope="module")
def volterra(fig2, fig2_part):
    x = State(fig2.v_r, 6.0)
    t_grid = np.linspace(0.0, 2.0, 161)
    return x, solve_rate_volterra(fig2, fig2_part, x, 0.0, t_grid,
                                  n_lattice=140)


def test_volterra_rate_dominates_density(volterra):
    x, sol = volterra
    mask = ~np.isnan(sol.r)
    assert np.all(sol.r[mask] >= sol.p[mask] - 1e-12)


def test_volterra_apriori_bound(fig2, volterra):
    # r <= -C/lam(v_r) + (lam(x1) + C/lam(v_r)) e^{lam(v_r) (t-s)} with C
    # the one-sided bound on lambda'(F + alpha) - lambda^2
    from mkv_neuro.assumptions import check_assumptions

    x, sol = volterra
    rep = check_assumptions(fig2)
    C = max(rep.evidence["A6"][k]["C_lambda"]
            for k in rep.evidence["A6"])
    lam_r = float(fig2.lam(fig2.v_r))
    lam_x = float(fig2.lam(x.v))
    t = sol.durations
    bound = -C / lam_r + (lam_x + C / lam_r) * np.exp(lam_r * t)
    assert np.all(sol.r_of_t() <= bound + 1e-9)


def test_volterra_row_continuity(volterra):
    x, sol = volterra
    r = sol.r_of_t()
    p = sol.p[0]
    h = sol.durations[1] - sol.durations[0]
    jumps = np.abs(np.diff(r))
    scale = 10.0 * np.maximum(np.abs(np.diff(p)), h)
    assert np.all(jumps <= scale + 0.5)


def test_volterra_mesh_convergence(fig2, fig2_part):
    x = State(fig2.v_r, 6.0)
    sols = []
    for m in (41, 81, 161):
        t_grid = np.linspace(0.0, 1.0, m)
        sols.append(solve_rate_volterra(fig2, fig2_part, x, 0.0, t_grid,
                                        n_lattice=120))
    c1 = float(np.max(np.abs(sols[1].r_of_t()[::2] - sols[0].r_of_t())))
    c2 = float(np.max(np.abs(sols[2].r_of_t()[::2] - sols[1].r_of_t())))
    assert c2 < 4.0 * c1
    assert c2 < c1  # order >= 1 in practice


def test_volterra_matches_monte_carlo(fig2, fig2_part):
    # the solver runs on its own fine mesh (quadrature bias O(h^2) must sit
    # below the Monte Carlo band); the comparison grid is coarser
    x = State(fig2.v_r, 6.0)
    fine = np.linspace(0.0, 1.5, 241)
    sol = solve_rate_volterra(fig2, fig2_part, x, 0.0, fine, n_lattice=140)
    sub = np.arange(0, 241, 4)[1:]
    mc = estimate_lambda_curve(fig2, x, fine[sub], 30_000, seed=31)
    resid = np.abs(sol.r_of_t()[sub] - mc["mean_lambda"])
    assert np.all(resid <= 3.0 * mc["stderr"] + 1e-9)


def test_volterra_rejects_time_varying_current(fig2, fig2_part):
    with pytest.raises(NotImplementedError):
        solve_rate_volterra(fig2, fig2_part, State(fig2.v_r, 6.0),
                            (np.array([0.0, 1.0]), np.array([0.0, 1.0])),
                            np.linspace(0.0, 1.0, 11))


def test_second_moment_diagnostic(fig2, fig2_part):
    sol = solve_rate_volterra(fig2, fig2_part, State(fig2.v_r, 6.0), 0.0,
                              np.linspace(0.0, 0.8, 33), n_lattice=80,
                              second_moment=True)
    assert sol.r2 is not None
    # E lambda^2 >= (E lambda)^2 pointwise
    assert np.all(sol.r2 >= sol.r_of_t() ** 2 - 1e-9)


def test_rate_grid_csv_export(fig2, fig2_part, tmp_path):
    from mkv_neuro.io_utils import rate_grid_rows, write_csv

    sol = solve_rate_volterra(fig2, fig2_part, State(fig2.v_r, 6.0), 0.0,
                              np.linspace(0.0, 0.5, 21), n_lattice=60)
    path = tmp_path / "rate.csv"
    write_csv(path, "s,t,p,r", rate_grid_rows(sol))
    lines = path.read_text().splitlines()
    assert lines[0] == "s,t,p,r"
    assert len(lines) == 1 + 21 * 22 // 2
    s0, t0, p0, r0 = map(float, lines[1].split(","))
    assert (s0, t0) == (0.0, 0.0)
    assert r0 == p0  # r(s, x, s) = p(s, x, s) = lambda(x)
