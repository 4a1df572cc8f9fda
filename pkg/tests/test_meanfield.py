import math

import numpy as np
import pytest

from mkv_neuro.meanfield import (FixedPointResult, _ResidualPipeline,
                                 continuation_in_J, replay_block,
                                 simulate_mkv, solve_fixed_point,
                                 stationary_residual)
from mkv_neuro.model import State, fig2_model
from mkv_neuro.pdmp import simulate_linear


def _mu0():
    return (1.0, 5.0)


def test_mkv_requires_delay(fig2_part):
    m = fig2_model(J=0.5, D=0.0)
    with pytest.raises(ValueError, match="delay"):
        simulate_mkv(m, fig2_part, _mu0, horizon=1.0, M=10, rng=(1, "mkv"))


def test_mkv_decoupled_is_flat_zero(fig2_part):
    m = fig2_model(J=0.0, D=1.0)
    mf = simulate_mkv(m, fig2_part, _mu0, horizon=5.0, M=300,
                      rng=(2, "mkv"))
    assert np.all(mf.kappa == 0.0)
    assert np.all(np.isfinite(mf.lam_mean))


def test_mkv_first_block_constant(fig2_part):
    m = fig2_model(J=0.8, D=1.0)
    mf = simulate_mkv(m, fig2_part, _mu0, horizon=3.0, M=400,
                      rng=(3, "mkv"))
    lam0 = float(m.lam(1.0))  # point initial law
    first = mf.t <= m.D
    assert np.allclose(mf.kappa[first], m.J * lam0, rtol=1e-12)


def test_mkv_block_replay_bit_identical(fig2_part):
    m = fig2_model(J=0.6, D=1.0)
    mf = simulate_mkv(m, fig2_part, _mu0, horizon=4.0, M=200,
                      rng=(4, "mkv"), archive=True)
    # replay block k from its archive; states must match the block k+1 entry
    for k in range(len(mf.archives) - 1):
        out = replay_block(m, mf.archives[k])
        nxt = mf.archives[k + 1]
        assert np.array_equal(out["v"], nxt["v"])
        assert np.array_equal(out["w"], nxt["w"])
        assert np.array_equal(out["E"], nxt["E"])
        assert np.array_equal(out["ctr"], nxt["ctr"])


def test_mkv_kappa_continuous_across_blocks(fig2_part):
    m = fig2_model(J=0.8, D=1.0)
    mf = simulate_mkv(m, fig2_part, _mu0, horizon=8.0, M=3000,
                      rng=(5, "mkv"), nodes_per_block=8)
    # jumps of kappa across block edges stay within a few MC stderr
    for te in mf.block_edges[1:-1]:
        i = int(np.searchsorted(mf.t, te))
        if 0 < i < mf.t.size - 1:
            jump = abs(mf.kappa[i + 1] - mf.kappa[i - 1])
            se = mf.stderr[i] + mf.stderr[i + 1] + 1e-12
            assert jump < 6.0 * se + 0.05 * abs(mf.kappa[i])


# -- deterministic residual and continuation -----------------------------------


def test_residual_at_zero_kappa(fig2):
    out = stationary_residual(fig2, kappa=0.0, J=0.7, n_w=300)
    assert out["g"] == pytest.approx(-0.7)
    assert out["E_T1"] > 0


def test_residual_deterministic_across_runs(fig2):
    # no Monte Carlo anywhere in the residual pipeline
    a = stationary_residual(fig2, kappa=0.8, J=0.5, n_w=300)
    b = stationary_residual(fig2, kappa=0.8, J=0.5, n_w=300)
    assert abs(a["g"] - b["g"]) < 1e-12
    assert abs(a["E_T1"] - b["E_T1"]) < 1e-12


def test_residual_continuity_scan(fig2):
    pipe = _ResidualPipeline(fig2, n_w=300)
    kappas = np.linspace(0.0, 2.0, 9)
    gs = [pipe(float(k), 0.0)[0] for k in kappas]
    for k in range(len(kappas) - 1):
        g1, _ = pipe(float(kappas[k]) + 1e-4, 0.0)
        assert abs(g1 - gs[k]) < 1e-2 * (1.0 + abs(gs[k]))
    # monotone increasing residual over the scan (empirical)
    assert all(b > a for a, b in zip(gs, gs[1:]))


def test_fixed_point_trivial_and_small_J(fig2):
    res0 = solve_fixed_point(fig2, 0.0)
    assert res0.kappa == 0.0 and res0.converged
    pipe = _ResidualPipeline(fig2, n_w=300)
    res = solve_fixed_point(fig2, 0.3, pipeline=pipe)
    assert res.converged
    assert res.kappa > 0.0
    assert abs(res.residual) < 1e-8 * (1.3)
    # bracket consistency around the root
    delta = 1e-5 * 10
    g_lo, _ = pipe(res.kappa - delta, 0.3)
    g_hi, _ = pipe(res.kappa + delta, 0.3)
    assert g_lo < 0.0 < g_hi


def test_continuation_curve(fig2):
    J_grid = np.linspace(0.0, 1.0, 5)
    results = continuation_in_J(fig2, J_grid, n_w=300)
    assert all(r.converged for r in results)
    kappas = [r.kappa for r in results]
    assert kappas[0] == 0.0
    assert all(b > a for a, b in zip(kappas, kappas[1:]))
    # local slope at the origin: d kappa / d J = 1 / E_T1(0), finite
    # difference at a small step
    e0 = results[0].E_T1
    dJ = 0.01
    small = solve_fixed_point(fig2, dJ,
                              pipeline=_ResidualPipeline(fig2, n_w=300))
    slope = small.kappa / dJ
    assert slope == pytest.approx(1.0 / e0, rel=0.02)


def test_fixed_point_closure_monte_carlo(fig2, fig2_part):
    # a constant-kappa* linear run reproduces kappa* = J * empirical rate
    pipe = _ResidualPipeline(fig2, n_w=300)
    J = 0.5
    res = solve_fixed_point(fig2, J, pipeline=pipe)
    path = simulate_linear(fig2, fig2_part, State(fig2.v_r, 6.0),
                           kappa=res.kappa, horizon=3000.0,
                           rng=(77, "mf/closure", 0))
    S = path.record.S[200:]
    S = S[:S.size // 40 * 40]
    blocks = S.reshape(40, -1).sum(axis=1)
    rate = S.size / S.sum()
    rate_se = rate * blocks.std() / blocks.mean() / math.sqrt(blocks.size)
    assert abs(J * rate - res.kappa) < 3.0 * J * rate_se + 1e-3
