"""Event-driven simulation of the N-neuron excitatory network with delayed
all-to-all kicks of size J/N.

Spikes delivered after delay D partition time into chunks: between two
delivery times no neuron can influence another (its own spikes deliver at
least D later), so every neuron advances exactly and independently through
the chunk with its own hazard budget.  At a delivery, every potential except
the emitter's is bumped by J/N and hazard integration resumes with the
remaining budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _core
from .dynamics import Partition, StepUnderflow, ToleranceConfig
from .model import ModelSpec
from .rng import derive_key, uniforms

__all__ = [
    "NetworkState", "SpikeRaster", "simulate_network", "population_rate",
    "BlowUpCascade", "make_mu0",
]


class BlowUpCascade(RuntimeError):
    """Per-unit-time spike count exceeded the watchdog (relevant for the
    exploratory D = 0 mode)."""


@dataclass
class SpikeRaster:
    t: np.ndarray
    i: np.ndarray
    N: int
    horizon: float
    bin: float = 1.0


@dataclass
class NetworkState:
    v: np.ndarray
    w: np.ndarray
    hazard: np.ndarray      # consumed hazard per neuron
    budget: np.ndarray      # outstanding exponential budgets
    clock: float
    pending_kicks: list     # heap of (delivery time, emitter)
    kicks_applied: int = 0
    kicks_drained: int = 0  # deliveries scheduled past the horizon


def make_mu0(spec, part: Optional[Partition], seed: int,
             tag: str = "network/init"):
    """Initial-law sampler factory: point mass, uniform rectangle, or an
    explicit array of states; support is validated against the domain."""
    if isinstance(spec, dict):
        kind = spec.get("kind", "point")
        if kind == "point":
            v0, w0 = float(spec["v"]), float(spec["w"])

            def draw(n):
                return np.full(n, v0), np.full(n, w0)
        elif kind == "uniform":
            v_lo, v_hi = float(spec["v_lo"]), float(spec["v_hi"])
            w_lo, w_hi = float(spec["w_lo"]), float(spec["w_hi"])

            def draw(n):
                key = derive_key(seed, tag, 0)
                u = uniforms(key, 0, 2 * n)
                return (v_lo + (v_hi - v_lo) * u[:n],
                        w_lo + (w_hi - w_lo) * u[n:])
        elif kind == "array":
            arr = np.asarray(spec["states"], float)

            def draw(n):
                if arr.shape[0] < n:
                    raise ValueError("mu0 array smaller than N")
                return arr[:n, 0].copy(), arr[:n, 1].copy()
        elif kind == "file":
            # CSV with a v,w header, one state per row
            arr = np.loadtxt(spec["path"], delimiter=",", skiprows=1,
                             ndmin=2)

            def draw(n):
                if arr.shape[0] < n:
                    raise ValueError("mu0 file smaller than N")
                return arr[:n, 0].copy(), arr[:n, 1].copy()
        else:
            raise ValueError(f"unknown mu0 kind {kind!r}")
    else:
        arr = np.asarray(spec, float)

        def draw(n):
            return arr[:n, 0].copy(), arr[:n, 1].copy()

    def sampler(n):
        vs, ws = draw(n)
        if part is not None:
            bar = part.barrier_w(vs)
            if np.any(ws < bar - 1e-9):
                raise ValueError("mu0 support leaves the working region")
        return vs, ws
    return sampler


def simulate_network(model: ModelSpec, part: Optional[Partition], N: int,
                     mu0, horizon: float, seed: int,
                     ctrl: ToleranceConfig = ToleranceConfig(),
                     allow_zero_delay: bool = False,
                     zero_delay_bin: float = 1e-3,
                     watchdog_rate: float = 1e5,
                     stream_permutation=None,
                     raster_cap: int = 10_000_000,
                     raster_path=None,
                     ) -> tuple[SpikeRaster, NetworkState]:
    """Exact event-driven network run on [0, horizon].

    Every spike of neuron i at t schedules one delivery at t + D that bumps
    all other potentials by J/N.  Deliveries at identical times apply in
    emitter order.  Deterministic replay for a fixed seed; the per-neuron
    streams can be permuted to probe exchangeability.

    With raster_path set, spikes stream to that CSV window by window
    instead of accumulating in memory (for runs beyond raster_cap spikes);
    the returned raster then carries only the total count.
    """
    if N < 1:
        raise ValueError("N >= 1")
    D = model.D
    if D <= 0:
        if not allow_zero_delay:
            raise ValueError(
                "D = 0 is exploratory (well-posedness is open); pass "
                "allow_zero_delay=True to run with a blow-up watchdog")
        D = 0.0
    p = model.compile()
    v_sw = ctrl.v_switch_for(model)
    kick = model.J / N

    sampler = mu0 if callable(mu0) else make_mu0(mu0, part, seed)
    vs, ws = sampler(N)
    vs = np.ascontiguousarray(vs, float)
    ws = np.ascontiguousarray(ws, float)
    perm = (np.arange(N) if stream_permutation is None
            else np.asarray(stream_permutation, int))
    keys = np.array([derive_key(seed, "network/neuron", int(perm[i]))
                     for i in range(N)], dtype=np.uint64)
    ctrs = np.ones(N, dtype=np.uint64)
    lams = np.zeros(N)
    Es = np.array([_core.exp_draw(keys[i], np.uint64(0)) for i in range(N)])

    # windows never exceed the delay, so every delivery inside a window
    # stems from spikes discovered in earlier windows
    window = max(D, zero_delay_bin) if D > 0 or allow_zero_delay else D
    if window <= 0:
        window = zero_delay_bin
    rate_guess = max(1.0, float(model.lam(model.v_r)))
    per_cap = int(64 + 16 * rate_guess * window)
    out_t = np.empty((N, per_cap))
    out_n = np.zeros(N, dtype=np.int64)
    statuses = np.zeros(N, dtype=np.int64)

    all_t: list[np.ndarray] = []
    all_i: list[np.ndarray] = []
    n_total = 0
    sink = None
    if raster_path is not None:
        from pathlib import Path

        Path(raster_path).parent.mkdir(parents=True, exist_ok=True)
        sink = open(raster_path, "w", encoding="utf-8", newline="\n")
        sink.write("t,i\n")
    # (delivery time, emitter), sorted; produced window by window
    pending_t = np.zeros(0)
    pending_e = np.zeros(0, dtype=np.int64)
    kicks_applied = 0
    kicks_drained = 0
    clock = 0.0

    while clock < horizon:
        t1 = min(clock + window, horizon)
        inside = pending_t <= t1 + 1e-15
        kick_ts = np.ascontiguousarray(pending_t[inside])
        kick_em = np.ascontiguousarray(pending_e[inside])
        pending_t = pending_t[~inside]
        pending_e = pending_e[~inside]
        _core.network_window(
            vs, ws, lams, Es, keys, ctrs, clock, t1, kick_ts, kick_em,
            kick, p, ctrl.rel_tol, ctrl.abs_tol, v_sw, ctrl.v_explode,
            out_t, out_n, statuses, per_cap)
        if np.any(statuses == _core.UNDERFLOW):
            raise BlowUpCascade(
                "per-window spike buffer overflow; the network is "
                "cascading beyond the watchdog scale")
        if np.any(statuses == _core.EXPLODED):
            raise StepUnderflow(
                "a neuron reached the explosion guard with unspent budget")
        kicks_applied += kick_ts.size * (N - 1)
        ns = int(out_n.sum())
        if ns:
            ts_w = np.concatenate([out_t[i, :out_n[i]] for i in range(N)
                                   if out_n[i]])
            is_w = np.concatenate([np.full(out_n[i], i, dtype=np.int64)
                                   for i in range(N) if out_n[i]])
            order = np.argsort(ts_w, kind="stable")
            ts_w = ts_w[order]
            is_w = is_w[order]
            n_total += ns
            if sink is not None:
                from .io_utils import fmt

                for tt, ii in zip(ts_w, is_w):
                    sink.write(f"{fmt(tt)},{ii}\n")
            else:
                all_t.append(ts_w)
                all_i.append(is_w)
                if n_total > raster_cap:
                    raise MemoryError(
                        "raster exceeded the in-memory cap; stream it with "
                        "raster_path or lower the horizon")
            if ns / max(t1 - clock, 1e-12) > watchdog_rate:
                raise BlowUpCascade(
                    f"spike rate exceeded the watchdog {watchdog_rate}")
            # schedule this window's deliveries
            new_t = ts_w + D
            keep = new_t <= horizon + D
            pending_t = np.concatenate([pending_t, new_t[keep]])
            pending_e = np.concatenate([pending_e, is_w[keep]])
            # deliveries at identical timestamps must apply in emitter order
            srt = np.lexsort((pending_e, pending_t))
            pending_t = pending_t[srt]
            pending_e = pending_e[srt]
        clock = t1

    kicks_drained = pending_t.size * (N - 1)

    if sink is not None:
        sink.close()
    ts = np.concatenate(all_t) if all_t else np.zeros(0)
    is_ = np.concatenate(all_i) if all_i else np.zeros(0, dtype=np.int64)
    raster = SpikeRaster(t=ts, i=is_, N=N, horizon=horizon)
    raster.n_streamed = n_total if sink is not None else 0
    state = NetworkState(v=vs, w=ws, hazard=lams, budget=Es, clock=clock,
                         pending_kicks=[(float(t), int(e)) for t, e
                                        in zip(pending_t, pending_e)],
                         kicks_applied=kicks_applied,
                         kicks_drained=kicks_drained)
    return raster, state


def population_rate(raster: SpikeRaster, bin: float) -> dict:
    """Spike counts per bin divided by N * bin."""
    if bin <= 0:
        raise ValueError("bin must be > 0")
    n_bins = max(1, int(math.ceil(raster.horizon / bin)))
    edges = bin * np.arange(n_bins + 1)
    if raster.t.size == 0:
        return {"t": 0.5 * (edges[:-1] + edges[1:]),
                "rate": np.zeros(n_bins)}
    counts = np.histogram(raster.t, bins=edges)[0]
    return {"t": 0.5 * (edges[:-1] + edges[1:]),
            "rate": counts / (raster.N * bin)}
