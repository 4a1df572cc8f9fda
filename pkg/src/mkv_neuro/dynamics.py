"""Deterministic layer: separatrix, phase-space partition, flow integration
with finite-time blow-up handling, and region classification.

The working region P is everything on or above a separatrix, a backward
orbit from a wedge point (v*, v*) chosen where F'(v*) < -3, frozen at its
leftmost diagonal intersection (w*, w*) and extended to the right by the
horizontal barrier w = w*.  The partition P1..P4 is cut by the horizontal
line {w = w23}, the vertical line {v = v34 = w23}, the diagonal w = v and
the right branch of the v-nullcline.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import quad, solve_ivp

from .model import EXP_CAP, ModelSpec, State, equilibria, nullclines

__all__ = [
    "RegionId", "Partition", "Trajectory", "ToleranceConfig",
    "build_separatrix", "build_partition", "classify", "integrate",
    "hitting_times", "NoSeparatrix", "InvalidMargin", "StepUnderflow",
    "LeftDomain", "w_increment_bound", "explosion_w_sup",
]


class NoSeparatrix(RuntimeError):
    """No admissible wedge point with F'(v*) < -3 in the search window."""


class InvalidMargin(ValueError):
    pass


class StepUnderflow(RuntimeError):
    pass


class LeftDomain(RuntimeError):
    """Trajectory crossed below the separatrix beyond tolerance; indicates
    an integration-accuracy bug, the flow cannot do this."""


class RegionId(enum.Enum):
    P1 = "P1"
    P2 = "P2"
    P3 = "P3"
    P4 = "P4"
    BelowSeparatrix = "below"


@dataclass(frozen=True)
class ToleranceConfig:
    rel_tol: float = 1e-8
    abs_tol: float = 1e-10
    v_explode: float = 1e6
    v_switch: float = 1e3
    sep_tol: float = 1e-6
    graze_tol: float = 1e-8
    fp_tol: float = 1e-8
    max_iters: int = 10_000
    root_tol: float = 1e-8

    def v_switch_for(self, model: ModelSpec) -> float:
        """Largest usable t-phase boundary: where F or lambda passes 1e12
        the t-stepper would stall, so the v-parametrized leg takes over."""
        v = self.v_switch
        while v > 8.0 and (model.F(v) > 1e12 or model.lam(v) > 1e12
                           or v + 1.0 > EXP_CAP):
            v *= 0.75
        return v


@dataclass(frozen=True)
class Partition:
    """Separatrix polyline plus the thresholds cutting P into P1..P4.

    Valid for every current I in i_range (shared construction); the
    polyline is the most permissive barrier of the family (built at
    i_range[1], which lies lowest).
    """

    w_star: float
    w23: float
    v34: float
    sep_v: np.ndarray         # ascending v, ending at the wedge point v*
    sep_w: np.ndarray         # matching ordinatess, decreasing to w*
    i_range: tuple[float, float]
    alpha_minus: float        # wedge boundary slope, extends the polyline
    v_star: float

    def barrier_w(self, v):
        """Separatrix ordinate under which no trajectory may pass."""
        v = np.asarray(v, float)
        out = np.interp(v, self.sep_v, self.sep_w)
        below = v < self.sep_v[0]
        if np.any(below):
            out = np.where(
                below,
                self.sep_w[0] + self.alpha_minus * (v - self.sep_v[0]),
                out,
            )
        out = np.where(v >= self.v_star, self.w_star, out)
        return out if out.ndim else float(out)

    def contains(self, s: State, tol: float = 0.0) -> bool:
        return s.w >= self.barrier_w(s.v) - tol

    @property
    def separatrix(self) -> list[State]:
        return [State(float(v), float(w))
                for v, w in zip(self.sep_v, self.sep_w)]


@dataclass
class Trajectory:
    t: np.ndarray
    v: np.ndarray
    w: np.ndarray
    region: list[RegionId]
    blow_up: Optional[float] = None
    exit_events: list[tuple[float, RegionId]] = field(default_factory=list)

    def state(self, i: int) -> State:
        return State(float(self.v[i]), float(self.w[i]))


def _wedge_point(model: ModelSpec, I_low: float) -> tuple[float, float]:
    """Scan left from argmin F for v* with F'(v*) < -3.1, (v*, v*) strictly
    below the v-nullcline at the lowest current of the family, and
    v* < min F + I (so (v*, v*) qualifies as the frozen tail point)."""
    vm = model.argmin_F()
    minF = float(model.F(vm))
    v = vm
    step = 0.25
    for _ in range(100_000):
        v -= step
        if (model.dF(v) < -3.0 - 0.1
                and model.F(v) + I_low > v
                and v < minF + I_low):
            # alpha^2 - alpha + 1 - alpha F'(v*) = 0, smallest-|.| negative root
            fp = float(model.dF(v))
            disc = (1.0 + fp) ** 2 - 4.0
            if disc <= 0:
                continue
            alpha = 0.5 * ((1.0 + fp) + math.sqrt(disc))
            return float(v), float(alpha)
        if v < vm - 1e6:
            break
    raise NoSeparatrix(
        "no wedge point with F'(v*) < -3 found (for the exponential family "
        "this needs slope a > 3)")


def build_separatrix(model: ModelSpec, w_top: float = 60.0,
                     ctrl: ToleranceConfig = ToleranceConfig(),
                     I_build: Optional[float] = None,
                     I_wedge: Optional[float] = None) -> Partition:
    """Backward orbit through the wedge point; returns a partition shell
    with only the separatrix data filled (w23/v34 come from
    build_partition).  I_build selects the current the orbit is integrated
    at (defaults to the model's I); I_wedge the current the wedge-point
    conditions are verified at, so a family over a current range can share
    one wedge point (the conditions are one-sided in I)."""
    I_b = model.I if I_build is None else float(I_build)
    v_star, alpha = _wedge_point(
        model, I_b if I_wedge is None else float(I_wedge))
    m = model.with_current(I_b)

    def back_rhs(t, y):
        v, w = y
        return [-(m.F(v) - w + m.I), -(v - w)]

    def hit_top(t, y):
        return y[1] - (w_top + abs(v_star))
    hit_top.terminal = True

    def hit_floor(t, y):
        return y[0] - (v_star - 1e4)
    hit_floor.terminal = True

    sol = solve_ivp(back_rhs, (0.0, 1e4), [v_star, v_star],
                    method="RK45", rtol=1e-11, atol=1e-12,
                    events=[hit_top, hit_floor], dense_output=False,
                    max_step=8e-4)
    if not sol.success and sol.status != 1:
        raise NoSeparatrix(f"backward orbit failed: {sol.message}")
    vs = sol.y[0][::-1]
    ws = sol.y[1][::-1]
    keep = np.concatenate(([True], np.diff(vs) > 0))
    vs, ws = vs[keep], ws[keep]
    w_star = v_star  # leftmost diagonal intersection is the wedge point
    return Partition(
        w_star=w_star, w23=math.nan, v34=math.nan,
        sep_v=np.ascontiguousarray(vs), sep_w=np.ascontiguousarray(ws),
        i_range=(I_b, I_b), alpha_minus=alpha, v_star=v_star,
    )


def _critical_ordinate(model: ModelSpec, I: float) -> float:
    """Ordinate every P2/P3 boundary must clear at current I: above any
    equilibrium, above the nullcline minimum, above the v-nullcline on the
    reset line."""
    m = model.with_current(I)
    eqs = equilibria(m)
    vals = [model.F(model.argmin_F()) + I, model.F(model.v_r) + I]
    vals.extend(eqs)
    return max(float(x) for x in vals)


def build_partition(model: ModelSpec,
                    I_range: Optional[tuple[float, float]] = None,
                    margin: float = 1.0,
                    ctrl: ToleranceConfig = ToleranceConfig(),
                    w_top: float = 60.0) -> Partition:
    """Partition shared by every current in I_range (defaults to the
    model's own I): common w*, w23, v34; separatrix integrated at the high
    current, which gives the lowest (most permissive) barrier."""
    if margin <= 0:
        raise InvalidMargin("margin must be > 0")
    if I_range is None:
        I_range = (model.I, model.I)
    I_low, I_high = float(min(I_range)), float(max(I_range))

    # shared wedge point (verified at the low end where the conditions are
    # tightest); the orbit itself runs at the high current, which lies
    # lowest and is the permissive common barrier of the family
    shell = build_separatrix(model, w_top=w_top, ctrl=ctrl, I_build=I_high,
                             I_wedge=I_low)

    crit = max(_critical_ordinate(model, I_low),
               _critical_ordinate(model, I_high))
    w23 = crit + margin
    # raise w23 until the backward-reachability check passes: the flow from
    # (v_r, w0) at the low current must hit the v-nullcline in finite time
    for _ in range(60):
        if _hits_v_nullcline(model, I_low, w23, ctrl):
            break
        w23 += margin
    else:
        raise NoSeparatrix("could not certify backward reachability for w23")
    part = replace(shell, w23=float(w23), v34=float(w23),
                   i_range=(I_low, I_high))
    # reset line must pierce {w = w23} strictly above the v-nullcline
    if not (model.F(model.v_r) + I_high < w23):
        raise InvalidMargin("reset line does not clear the v-nullcline")
    return part


def _hits_v_nullcline(model: ModelSpec, I: float, w0: float,
                      ctrl: ToleranceConfig, horizon: float = 200.0) -> bool:
    m = model.with_current(I)

    def rhs(t, y):
        return [m.F(y[0]) - y[1] + m.I, y[0] - y[1]]

    def on_null(t, y):
        return m.F(y[0]) + m.I - y[1]
    on_null.terminal = True

    sol = solve_ivp(rhs, (0.0, horizon), [m.v_r, w0], method="RK45",
                    rtol=1e-8, atol=1e-10, events=[on_null])
    return bool(sol.t_events[0].size)


def classify(model: ModelSpec, part: Partition, s: State,
             sep_tol: float = 1e-6) -> RegionId:
    """Region of a state, honoring the boundary-membership conventions:
    P1 holds its v-nullcline boundary, P3 holds its piece of {w = w23},
    P4 holds its piece of {v = v34} and of the diagonal."""
    v, w = float(s[0]), float(s[1])
    if w < part.barrier_w(v) - sep_tol:
        return RegionId.BelowSeparatrix
    if w > part.w23:
        # above the horizontal cut: diagonal first (P4 owns it), then the
        # right nullcline branch (P1 owns it)
        if w <= v:
            return RegionId.P4
        ncl = nullclines(model, w)
        v_plus = ncl["v_plus"]
        if v_plus is not None and v >= v_plus:
            return RegionId.P1
        return RegionId.P2
    if v >= part.v34:
        return RegionId.P4
    return RegionId.P3


def integrate(model: ModelSpec, part: Partition, s0: State,
              kappa: float | Callable[[float], float] = 0.0,
              t_span: tuple[float, float] = (0.0, 50.0),
              ctrl: ToleranceConfig = ToleranceConfig()) -> Trajectory:
    """Adaptive trajectory of the flow from s0; terminates early at blow-up
    with the explosion time refined by tail quadrature.

    Region-transition events are recorded as (time, region entered).
    """
    if not part.contains(s0, tol=ctrl.sep_tol):
        raise LeftDomain("initial state below the separatrix")
    kf = kappa if callable(kappa) else (lambda t, _k=float(kappa): _k)
    t0, t1 = t_span
    v_sw = ctrl.v_switch_for(model)

    def rhs(t, y):
        return [model.F(y[0]) - y[1] + model.I + kf(t), y[0] - y[1]]

    def ev_switch(t, y):
        return y[0] - v_sw
    ev_switch.terminal = True
    ev_switch.direction = 1

    if s0[0] >= v_sw:
        # already on the explosive leg: no t-parametrized phase at all
        ts = [t0]
        vs = [float(s0[0])]
        ws = [float(s0[1])]
        blow_up = None
        on_leg = True
        t_sw, v_here, w_here = t0, float(s0[0]), float(s0[1])
    else:
        sol = solve_ivp(rhs, (t0, t1), [s0[0], s0[1]], method="RK45",
                        rtol=ctrl.rel_tol, atol=ctrl.abs_tol,
                        events=[ev_switch], dense_output=False)
        if sol.status == -1:
            raise StepUnderflow(sol.message)
        ts = list(sol.t)
        vs = list(sol.y[0])
        ws = list(sol.y[1])
        blow_up = None
        on_leg = sol.status == 1
        if on_leg:
            t_sw = float(sol.t_events[0][0])
            v_here = v_sw
            w_here = float(sol.y_events[0][0][1])

    if on_leg:  # explosive leg, switch the independent variable to v
        kap_max = max(kf(t_sw), kf(t1))

        def rhs_v(v, y):
            d = model.F(v) - y[0] + model.I + kf(y[1])
            return [(v - y[0]) / d, 1.0 / d]

        solv = solve_ivp(rhs_v, (v_here, ctrl.v_explode), [w_here, t_sw],
                         method="RK45", rtol=ctrl.rel_tol, atol=ctrl.abs_tol)
        if solv.status == -1:
            raise StepUnderflow(solv.message)
        ts.extend(solv.y[1][1:])
        vs.extend(solv.t[1:])
        ws.extend(solv.y[0][1:])
        w_stop = float(solv.y[0][-1])
        t_stop = float(solv.y[1][-1])
        # asymptotic tail: t_inf = t_stop + int dv / (F - w_stop + I + kap)
        tail, _ = quad(
            lambda u: 1.0 / (model.F(1.0 / u) - w_stop + model.I
                             + kap_max) / (u * u),
            1e-16, 1.0 / ctrl.v_explode, limit=200)
        blow_up = t_stop + float(tail)

    t_arr = np.asarray(ts)
    v_arr = np.asarray(vs)
    w_arr = np.asarray(ws)
    regions = [classify(model, part, State(v, w), ctrl.sep_tol)
               for v, w in zip(v_arr, w_arr)]

    # the flow cannot cross the separatrix; a violation beyond tolerance
    # means the integration accuracy broke down
    bar = part.barrier_w(v_arr)
    worst = float(np.min(w_arr - bar)) if len(ts) else 0.0
    if worst < -10.0 * max(ctrl.sep_tol, 1e-8) - 1e-12:
        raise LeftDomain(f"trajectory fell {-worst:.3e} below the separatrix")

    events: list[tuple[float, RegionId]] = []
    for i in range(1, len(regions)):
        if regions[i] != regions[i - 1]:
            events.append((float(t_arr[i]), regions[i]))
    return Trajectory(t=t_arr, v=v_arr, w=w_arr, region=regions,
                      blow_up=blow_up, exit_events=events)


def hitting_times(model: ModelSpec, part: Partition, s0: State,
                  ctrl: ToleranceConfig = ToleranceConfig(),
                  horizon: float = 200.0) -> dict:
    """First hitting times of the v-nullcline, of P3 and of P4 along the
    kappa = 0 flow; None when not reached before blow-up/horizon."""
    if not part.contains(s0, tol=ctrl.sep_tol):
        raise LeftDomain("initial state below the separatrix")
    v_sw = ctrl.v_switch_for(model)

    def rhs(t, y):
        return [model.F(y[0]) - y[1] + model.I, y[0] - y[1]]

    def ev_null(t, y):
        return model.F(y[0]) + model.I - y[1]

    def ev_w23(t, y):
        return y[1] - part.w23
    ev_w23.direction = -1

    def ev_v34(t, y):
        return y[0] - part.v34
    ev_v34.direction = 1

    def ev_switch(t, y):
        return y[0] - v_sw
    ev_switch.terminal = True
    ev_switch.direction = 1

    sol = solve_ivp(rhs, (0.0, horizon), [s0[0], s0[1]], method="RK45",
                    rtol=ctrl.rel_tol, atol=ctrl.abs_tol,
                    events=[ev_null, ev_w23, ev_v34, ev_switch])
    if sol.status == -1:
        raise StepUnderflow(sol.message)

    tau_v = float(sol.t_events[0][0]) if sol.t_events[0].size else None
    if abs(model.F(s0[0]) + model.I - s0[1]) < 1e-12:
        tau_v = 0.0

    tau_3 = None
    here = classify(model, part, s0, ctrl.sep_tol)
    if here == RegionId.P3:
        tau_3 = 0.0
    else:
        for te, ye in zip(sol.t_events[1], sol.y_events[1]):
            if ye[0] < part.v34:
                tau_3 = float(te)
                break

    tau_4 = None
    if here == RegionId.P4:
        tau_4 = 0.0
    else:
        cands = []
        for te, ye in zip(sol.t_events[2], sol.y_events[2]):
            if ye[1] <= part.w23:
                cands.append(float(te))
        # crossing the diagonal right of v34 also enters P4
        diag = sol.y[0] - sol.y[1]
        for i in range(1, diag.size):
            if diag[i - 1] < 0 <= diag[i] and sol.y[0][i] >= part.v34:
                cands.append(float(sol.t[i]))
                break
        if sol.t_events[3].size:  # ran off to blow-up: certainly in P4
            cands.append(float(sol.t_events[3][0]))
        if cands:
            tau_4 = min(cands)
    return {"tau_v": tau_v, "tau_3": tau_3, "tau_4": tau_4}


def explosion_w_sup(model: ModelSpec, part: Partition,
                    ctrl: ToleranceConfig = ToleranceConfig()) -> float:
    """Largest adaptation value reachable at explosion from the P3/P4
    corner; pre-jump kernel mass above max(w23, this) is structurally zero
    for rows started higher."""
    traj = integrate(model, part, State(part.v34, part.w23),
                     t_span=(0.0, 1e3), ctrl=ctrl)
    return float(np.max(traj.w))


def w_increment_bound(model: ModelSpec, part: Partition) -> float:
    """C of the per-excursion bound w(t) <= C + w0 from the reset line.

    The phase-wise bounds are w0 while the adaptation decreases, w23 in the
    trapped region, and w23 plus the explosive-leg integral
    int_{v34}^inf (u - w*) / (F(u) - u + I_low) du afterwards; the uniform
    constant over all w0 >= w* is therefore w23 - w* plus that integral.
    """
    I_low = part.i_range[0]

    def integrand(u):
        return (u - part.w_star) / (model.F(u) - u + I_low)

    hi = part.v34
    total = 0.0
    # integrate on doubling windows until the tail is negligible
    while True:
        seg, _ = quad(integrand, hi, hi * 2.0 + 10.0, limit=200)
        total += seg
        hi = hi * 2.0 + 10.0
        if abs(seg) < 1e-14 or hi > 1e8:
            break
    return part.w23 - part.w_star + total
