import math

import numpy as np
import pytest

from mkv_neuro.model import State, fig2_model
from mkv_neuro.network import (BlowUpCascade, SpikeRaster, make_mu0,
                               population_rate, simulate_network)
from mkv_neuro.pdmp import simulate_embedded_chain


MU0 = {"kind": "point", "v": 1.0, "w": 5.0}


def test_zero_delay_needs_flag(fig2_part):
    m = fig2_model(J=0.5, D=0.0)
    with pytest.raises(ValueError, match="zero_delay"):
        simulate_network(m, fig2_part, N=4, mu0=MU0, horizon=1.0, seed=1)
    raster, _ = simulate_network(m, fig2_part, N=4, mu0=MU0, horizon=1.0,
                                 seed=1, allow_zero_delay=True)
    assert raster.t.size > 0


def test_deterministic_replay(fig2_part):
    m = fig2_model(J=0.8, D=1.0)
    a, sa = simulate_network(m, fig2_part, N=16, mu0=MU0, horizon=20.0,
                             seed=5)
    b, sb = simulate_network(m, fig2_part, N=16, mu0=MU0, horizon=20.0,
                             seed=5)
    assert np.array_equal(a.t, b.t)
    assert np.array_equal(a.i, b.i)
    assert np.array_equal(sa.v, sb.v)


def test_uncoupled_matches_single_neuron_rate(fig2, fig2_part):
    # J = 0: independent copies; population rate agrees with the embedded
    # chain's long-run rate within Monte Carlo error
    m = fig2_model(J=0.0, D=1.0)
    N, horizon = 60, 120.0
    raster, _ = simulate_network(m, fig2_part, N=N, mu0=MU0,
                                 horizon=horizon, seed=8)
    rec = simulate_embedded_chain(fig2, fig2_part, 5.0, 40_000,
                                  rng=(8, "net/ref", 0))
    ref_rate = 1.0 / float(np.mean(rec.S[500:]))
    rate = raster.t.size / (N * horizon)
    counts = np.histogram(raster.i, bins=np.arange(N + 1))[0]
    se = counts.std() / math.sqrt(N) / horizon
    assert abs(rate - ref_rate) < 4.0 * se + 0.05 * ref_rate


def test_single_neuron_excludes_self_kicks(fig2_part):
    # N = 1 with huge J behaves exactly like the uncoupled neuron: the sum
    # over other neurons is empty
    m_big = fig2_model(J=50.0, D=0.5)
    m_zero = fig2_model(J=0.0, D=0.5)
    a, _ = simulate_network(m_big, fig2_part, N=1, mu0=MU0, horizon=50.0,
                            seed=3)
    b, _ = simulate_network(m_zero, fig2_part, N=1, mu0=MU0, horizon=50.0,
                            seed=3)
    assert np.array_equal(a.t, b.t)


def test_kick_ordering_delay(fig2_part):
    # a spike at t_s influences others only from t_s + D: with the delay
    # longer than the horizon the run is bit-identical to J = 0
    m_delay = fig2_model(J=5.0, D=100.0)
    m_zero = fig2_model(J=0.0, D=100.0)
    a, _ = simulate_network(m_delay, fig2_part, N=8, mu0=MU0, horizon=30.0,
                            seed=11)
    b, _ = simulate_network(m_zero, fig2_part, N=8, mu0=MU0, horizon=30.0,
                            seed=11)
    assert np.array_equal(a.t, b.t)
    # with a short delay the coupled run must differ
    m_short = fig2_model(J=5.0, D=0.5)
    c, _ = simulate_network(m_short, fig2_part, N=8, mu0=MU0, horizon=30.0,
                            seed=11)
    assert not np.array_equal(a.t, c.t)


def test_kick_conservation(fig2_part):
    m = fig2_model(J=1.0, D=1.0)
    raster, state = simulate_network(m, fig2_part, N=12, mu0=MU0,
                                     horizon=25.0, seed=13)
    n_spikes = raster.t.size
    assert state.kicks_applied + state.kicks_drained == n_spikes * 11
    # queue drains by horizon + D: nothing pending beyond it
    assert all(t <= 25.0 + m.D + 1e-9 for t, _ in state.pending_kicks)


def test_monotone_excitation(fig2_part):
    counts = []
    for J in (0.0, 0.5, 1.0):
        m = fig2_model(J=J, D=1.0)
        raster, _ = simulate_network(m, fig2_part, N=24, mu0=MU0,
                                     horizon=30.0, seed=17)
        counts.append(raster.t.size)
    assert counts[0] <= counts[1] <= counts[2]


def test_exchangeability_under_stream_permutation(fig2_part):
    m = fig2_model(J=0.7, D=1.0)
    N = 24
    a, _ = simulate_network(m, fig2_part, N=N, mu0=MU0, horizon=40.0,
                            seed=29)
    perm = np.roll(np.arange(N), 7)
    b, _ = simulate_network(m, fig2_part, N=N, mu0=MU0, horizon=40.0,
                            seed=29, stream_permutation=perm)
    ra = a.t.size / (N * 40.0)
    rb = b.t.size / (N * 40.0)
    se = math.sqrt(a.t.size) / (N * 40.0)
    assert abs(ra - rb) < 4.0 * se


def test_population_rate_counting():
    # homogeneous Poisson stream oracle at rate 2
    rng = np.random.default_rng(0)
    T = 400.0
    ts = np.sort(rng.uniform(0.0, T, rng.poisson(2.0 * T)))
    raster = SpikeRaster(t=ts, i=np.zeros(ts.size, dtype=np.int64), N=1,
                         horizon=T)
    out = population_rate(raster, bin=1.0)
    se = math.sqrt(2.0 / T)
    assert abs(out["rate"].mean() - 2.0) < 3.0 * se
    # bin halving preserves the time average exactly
    out2 = population_rate(raster, bin=0.5)
    assert out2["rate"].mean() * 0.5 * out2["t"].size == pytest.approx(
        out["rate"].mean() * 1.0 * out["t"].size)


def test_population_rate_empty():
    raster = SpikeRaster(t=np.zeros(0), i=np.zeros(0, dtype=np.int64), N=3,
                         horizon=10.0)
    out = population_rate(raster, bin=1.0)
    assert np.all(out["rate"] == 0.0)


def test_mu0_support_validated(fig2, fig2_part):
    bad = {"kind": "point", "v": fig2_part.w_star - 3.0,
           "w": fig2_part.w_star - 3.0}
    sampler = make_mu0(bad, fig2_part, seed=1)
    with pytest.raises(ValueError, match="support"):
        sampler(4)


def test_watchdog_fires(fig2_part):
    m = fig2_model(J=0.5, D=1.0)
    with pytest.raises(BlowUpCascade):
        simulate_network(m, fig2_part, N=50, mu0=MU0, horizon=10.0, seed=2,
                         watchdog_rate=1.0)
