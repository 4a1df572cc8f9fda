"""Hazard accumulation along the flow, the jump-time density, and exact
first-jump sampling guaranteed to precede deterministic blow-up.

The production sampler integrates the hazard time change (global in the
transformed variable), so the unit-exponential budget is spent exactly and
the sampled time always lands before the explosion.  A classical thinning
sampler with a per-step majorant is provided as an independent oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import _core
from .dynamics import Partition, StepUnderflow, ToleranceConfig
from .model import ModelSpec, State, reset
from .rng import derive_key, exponentials

__all__ = [
    "FirstJump", "HazardPoint", "survival", "jump_density",
    "sample_first_jump", "sample_first_jump_thinning", "sample_batch",
    "HorizonExceeded", "HazardExhausted",
]


class HorizonExceeded(RuntimeError):
    pass


class HazardExhausted(RuntimeError):
    """The time-changed flow reached v_explode before spending the
    exponential budget; the hazard integral failed to diverge (the
    divergence assumption on lambda/F does not hold for this model)."""


class HazardPoint(NamedTuple):
    t: float
    Lambda: float
    state: State


@dataclass(frozen=True)
class FirstJump:
    T1: float
    pre_state: State
    post_state: State
    exp_draw: float


def _kappa_pack(kappa) -> tuple[float, np.ndarray, np.ndarray]:
    """Constant or (t_knots, values) piecewise-linear current."""
    if kappa is None:
        return 0.0, np.zeros(0), np.zeros(0)
    if callable(kappa):
        raise TypeError(
            "pass a constant or a (t_knots, values) pair; arbitrary "
            "callables cannot cross into the compiled core")
    if isinstance(kappa, tuple):
        ts, vs = kappa
        ts = np.ascontiguousarray(ts, float)
        vs = np.ascontiguousarray(vs, float)
        if ts.size != vs.size or ts.size < 2:
            raise ValueError("kappa knots need matching arrays, >= 2 nodes")
        if np.any(vs < 0):
            raise ValueError("kappa must be nonnegative")
        return 0.0, ts, vs
    k = float(kappa)
    if k < 0:
        raise ValueError("kappa must be nonnegative")
    return k, np.zeros(0), np.zeros(0)


def survival(model: ModelSpec, part: Optional[Partition], x: State,
             kappa=0.0, t: float = 1.0,
             ctrl: ToleranceConfig = ToleranceConfig()) -> dict:
    """Accumulated hazard Lambda(t) and survival S = exp(-Lambda) for the
    flow from x; S = 0 once t passes the explosion time."""
    if t <= 0.0:
        return {"Lambda": 0.0, "S": 1.0}
    p = model.compile()
    kap0, kts, kvs = _kappa_pack(kappa)
    v_sw = ctrl.v_switch_for(model)
    v, w, lam, tt, st, wmx, _h = _core.advance(
        float(x[0]), float(x[1]), 0.0, math.inf, 0.0, float(t), p,
        kap0, kts, kvs, ctrl.rel_tol, ctrl.abs_tol, v_sw, ctrl.v_explode,
        1e-3)
    if st == _core.UNDERFLOW:
        raise StepUnderflow("hazard integration stalled")
    if st == _core.EXPLODED or lam >= _core.LAM_CAP:
        return {"Lambda": float(max(lam, _core.LAM_CAP)), "S": 0.0}
    return {"Lambda": float(lam), "S": float(math.exp(-lam))}


def jump_density(model: ModelSpec, part: Optional[Partition], x: State,
                 kappa=0.0, t: float = 1.0,
                 ctrl: ToleranceConfig = ToleranceConfig()) -> float:
    """p(t) = lambda(v(t)) exp(-Lambda(t)) for t before the explosion time,
    0 afterwards."""
    if t < 0.0:
        return 0.0
    if t == 0.0:
        return float(model.lam(x[0]))
    p = model.compile()
    kap0, kts, kvs = _kappa_pack(kappa)
    v_sw = ctrl.v_switch_for(model)
    v, w, lam, tt, st, wmx, _h = _core.advance(
        float(x[0]), float(x[1]), 0.0, math.inf, 0.0, float(t), p,
        kap0, kts, kvs, ctrl.rel_tol, ctrl.abs_tol, v_sw, ctrl.v_explode,
        1e-3)
    if st == _core.UNDERFLOW:
        raise StepUnderflow("hazard integration stalled")
    if st != _core.REACHED or lam >= _core.LAM_CAP:
        return 0.0
    return float(model.lam(v) * math.exp(-lam))


def sample_first_jump(model: ModelSpec, part: Optional[Partition], x: State,
                      kappa=0.0, rng=None, *, exp_value: Optional[float] = None,
                      ctrl: ToleranceConfig = ToleranceConfig()) -> FirstJump:
    """Exact first jump: draw E ~ Exp(1), integrate the time-changed system
    until the accumulated hazard equals E.  T1 < t_explosion by
    construction."""
    if exp_value is not None:
        E = float(exp_value)
    elif rng is None:
        raise ValueError("need rng=(seed, tag, stream) or exp_value")
    else:
        seed, tag, stream = rng
        E = float(exponentials(derive_key(seed, tag, stream), 0, 1)[0])
    p = model.compile()
    kap0, kts, kvs = _kappa_pack(kappa)
    v1, w1, t1, st, wmx = _core.sample_jump_tau(
        float(x[0]), float(x[1]), 0.0, E, p, kap0, kts, kvs,
        ctrl.rel_tol, ctrl.abs_tol, ctrl.v_explode)
    if st == _core.UNDERFLOW:
        raise StepUnderflow("time-changed integration stalled")
    if st == _core.EXPLODED:
        raise HazardExhausted(
            "flow reached v_explode with unspent hazard budget")
    pre = State(float(v1), float(w1))
    return FirstJump(T1=float(t1), pre_state=pre, post_state=reset(model, pre),
                     exp_draw=E)


def sample_first_jump_thinning(model: ModelSpec, part: Optional[Partition],
                               x: State, kappa=0.0, rng=None,
                               horizon: float = 1e3,
                               ctrl: ToleranceConfig = ToleranceConfig(),
                               ) -> tuple[FirstJump, dict]:
    """Oracle sampler: thinning under a per-segment constant majorant,
    failing over to the time-change sampler near blow-up.  Returns the jump
    plus acceptance diagnostics."""
    seed, tag, stream = rng
    key = np.uint64(derive_key(seed, tag, stream))
    p = model.compile()
    kap0, kts, kvs = _kappa_pack(kappa)
    v_sw = ctrl.v_switch_for(model)
    v1, w1, t1, st, ctr, nprop, nacc = _core.thinning_sample(
        float(x[0]), float(x[1]), 0.0, key, np.uint64(0), p, kap0, kts, kvs,
        ctrl.rel_tol, ctrl.abs_tol, v_sw, ctrl.v_explode, float(horizon))
    if st == _core.REACHED:
        raise HorizonExceeded(f"no jump before horizon {horizon}")
    if st == _core.UNDERFLOW:
        raise StepUnderflow("thinning flow integration stalled")
    if st == _core.EXPLODED:
        raise HazardExhausted("fail-over sampler ran out of hazard")
    pre = State(float(v1), float(w1))
    diag = {"proposals": int(nprop), "accepted": int(nacc),
            "acceptance_fraction": (int(nacc) / int(nprop)) if nprop else 1.0}
    return (FirstJump(T1=float(t1), pre_state=pre,
                      post_state=reset(model, pre), exp_draw=math.nan), diag)


def sample_batch(model: ModelSpec, starts, n_per_start: int, seed: int,
                 tag: str = "hazard/batch", kappa=0.0,
                 ctrl: ToleranceConfig = ToleranceConfig()) -> dict:
    """Vectorized first-jump sampling: n_per_start draws from each start.

    Returns arrays T1, v_pre, w_pre, w_max, exp_draw, start_index.
    """
    p = model.compile()
    kap0, kts, kvs = _kappa_pack(kappa)
    starts = [State(float(v), float(w)) for v, w in starts]
    n_tot = len(starts) * n_per_start
    v0 = np.empty(n_tot)
    w0 = np.empty(n_tot)
    for i, s in enumerate(starts):
        v0[i * n_per_start:(i + 1) * n_per_start] = s.v
        w0[i * n_per_start:(i + 1) * n_per_start] = s.w
    T1 = np.empty(n_tot)
    vp = np.empty(n_tot)
    wp = np.empty(n_tot)
    wm = np.empty(n_tot)
    Ed = np.empty(n_tot)
    stt = np.empty(n_tot, dtype=np.int64)
    key = np.uint64(derive_key(seed, tag, 0))
    _core.batch_first_jumps(v0, w0, key, p, kap0, kts, kvs,
                            ctrl.rel_tol, ctrl.abs_tol, ctrl.v_explode,
                            T1, vp, wp, wm, Ed, stt)
    if np.any(stt == _core.EXPLODED):
        raise HazardExhausted("a sample ran out of hazard before blow-up")
    if np.any(stt == _core.UNDERFLOW):
        raise StepUnderflow("a sample stalled")
    idx = np.repeat(np.arange(len(starts)), n_per_start)
    return {"T1": T1, "v_pre": vp, "w_pre": wp, "w_max": wm,
            "exp_draw": Ed, "start_index": idx}
