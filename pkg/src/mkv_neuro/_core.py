"""Jitted simulation core.

Everything here operates on the flat ``CompiledModel`` pack produced by
``ModelSpec.compile()``.  Three parametrizations of the same flow are used:

* t-space  : y = (v, w, Lambda), hazard as an extra ODE state;
* v-space  : y = (w, t, Lambda) with v as the independent variable, used past
  ``v_switch`` where the flow blows up in finite time and t-stepping stalls;
* tau-space: y = (v, w, t) parametrized by accumulated hazard, the global
  (explosion-free) form used for exact first-jump inversion.

The integrator is an embedded Dormand-Prince 5(4) pair with cubic Hermite
in-step interpolation for event location (hazard budget, v-switch, chunk-end
times, w-cell crossings).  All randomness enters as (key, counter) pairs of
the counter-based stream in ``rng.py``; the bit streams here match it.
"""

import math

import numpy as np
from numba import njit, prange

# statuses returned by the advancing routines
REACHED = 0    # hit the requested end time
JUMPED = 1     # hazard budget exhausted: spike
EXPLODED = 2   # reached v_explode without spending the budget (A2 failure)
UNDERFLOW = 3  # step-size underflow

LAM_CAP = 700.0      # survival exp(-LAM_CAP) is an exact 0 in double
EXP_ARG_CAP = 500.0

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_U53 = 2.0**-53

_NO_KNOTS = np.zeros(0)  # frozen global: "constant current" marker


@njit(cache=True, nogil=True, inline="always")
def _mix64(x):
    z = (x + _GAMMA) & _MASK
    z = ((z ^ (z >> np.uint64(30))) * _M1) & _MASK
    z = ((z ^ (z >> np.uint64(27))) * _M2) & _MASK
    return z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True, inline="always")
def exp_draw(key, ctr):
    raw = _mix64((key + ctr * _GAMMA) & _MASK)
    u = (float(raw >> np.uint64(11)) + 1.0) * _U53
    return -math.log(u)


@njit(cache=True, nogil=True, inline="always")
def uniform_draw(key, ctr):
    raw = _mix64((key + ctr * _GAMMA) & _MASK)
    return (float(raw >> np.uint64(11)) + 0.5) * _U53


# -- model evaluation ---------------------------------------------------------


@njit(cache=True, nogil=True, inline="always")
def f_F(v, p):
    poly = p.poly
    out = 0.0
    for k in range(poly.shape[0] - 1, -1, -1):
        out = out * v + poly[k]
    for j in range(p.eamps.shape[0]):
        arg = p.erates[j] * v
        if arg > EXP_ARG_CAP:
            arg = EXP_ARG_CAP
        out += p.eamps[j] * math.exp(arg)
    return out


@njit(cache=True, nogil=True, inline="always")
def f_lam(v, p):
    if p.lam_kind == 0:
        arg = p.lam_rate * v
        if arg > EXP_ARG_CAP:
            arg = EXP_ARG_CAP
        return p.lam_scale * math.exp(arg)
    vs = p.lam_vs
    ls = p.lam_ls
    n = vs.shape[0]
    if v <= vs[0]:
        return ls[0]
    if v >= vs[n - 1]:
        slope = (ls[n - 1] - ls[n - 2]) / (vs[n - 1] - vs[n - 2])
        return ls[n - 1] + slope * (v - vs[n - 1])
    lo, hi = 0, n - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if vs[mid] <= v:
            lo = mid
        else:
            hi = mid
    s = (v - vs[lo]) / (vs[lo + 1] - vs[lo])
    return ls[lo] + s * (ls[lo + 1] - ls[lo])


@njit(cache=True, nogil=True, inline="always")
def f_F_lam(v, p):
    """Fused evaluation of (F, lambda); the canonical exponential family
    shares one exp(v) between the drift and the rate."""
    if p.shared_exp == 1:
        poly = p.poly
        out = 0.0
        for k in range(poly.shape[0] - 1, -1, -1):
            out = out * v + poly[k]
        arg = p.erates[0] * v
        if arg > EXP_ARG_CAP:
            arg = EXP_ARG_CAP
        ev = math.exp(arg)
        return out + p.eamps[0] * ev, p.lam_scale * ev
    return f_F(v, p), f_lam(v, p)


@njit(cache=True, nogil=True, inline="always")
def kappa_at(t, kap0, kts, kvs):
    """Piecewise-linear current; constant kap0 when no knots are given."""
    n = kts.shape[0]
    if n == 0:
        return kap0
    if t <= kts[0]:
        return kvs[0]
    if t >= kts[n - 1]:
        return kvs[n - 1]
    lo, hi = 0, n - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if kts[mid] <= t:
            lo = mid
        else:
            hi = mid
    s = (t - kts[lo]) / (kts[lo + 1] - kts[lo])
    return kvs[lo] + s * (kvs[lo + 1] - kvs[lo])


# -- Dormand-Prince 5(4) on 3-component systems -------------------------------

# modes for the right-hand side
MODE_T = 0    # x = t, y = (v, w, Lambda)
MODE_V = 1    # x = v, y = (w, t, Lambda)
MODE_TAU = 2  # x = tau, y = (v, w, t)


@njit(cache=True, nogil=True, inline="always")
def _rhs(mode, x, y0, y1, y2, p, kap0, kts, kvs):
    if mode == MODE_T:
        v, w = y0, y1
        kap = kappa_at(x, kap0, kts, kvs)
        F, lam = f_F_lam(v, p)
        return F - w + p.I + kap, v - w, lam
    elif mode == MODE_V:
        v = x
        w, t = y0, y1
        kap = kappa_at(t, kap0, kts, kvs)
        F, lam = f_F_lam(v, p)
        d = F - w + p.I + kap
        return (v - w) / d, 1.0 / d, lam / d
    else:
        v, w, t = y0, y1, y2
        kap = kappa_at(t, kap0, kts, kvs)
        F, lam = f_F_lam(v, p)
        if lam < 1e-300:
            lam = 1e-300
        return (F - w + p.I + kap) / lam, (v - w) / lam, 1.0 / lam


@njit(cache=True, nogil=True)
def _dp_step(mode, x, y0, y1, y2, h, p, kap0, kts, kvs):
    """One Dormand-Prince 5(4) attempt.

    Returns (z0, z1, z2, e0, e1, e2, d0, d1, d2) where z is the 5th-order
    result, e the embedded error estimate and d the derivative at x + h.
    """
    a0, b0, c0 = _rhs(mode, x, y0, y1, y2, p, kap0, kts, kvs)

    u0 = y0 + h * 0.2 * a0
    u1 = y1 + h * 0.2 * b0
    u2 = y2 + h * 0.2 * c0
    a1, b1, c1 = _rhs(mode, x + 0.2 * h, u0, u1, u2, p, kap0, kts, kvs)

    u0 = y0 + h * (3.0 / 40.0 * a0 + 9.0 / 40.0 * a1)
    u1 = y1 + h * (3.0 / 40.0 * b0 + 9.0 / 40.0 * b1)
    u2 = y2 + h * (3.0 / 40.0 * c0 + 9.0 / 40.0 * c1)
    a2, b2, c2 = _rhs(mode, x + 0.3 * h, u0, u1, u2, p, kap0, kts, kvs)

    u0 = y0 + h * (44.0 / 45.0 * a0 - 56.0 / 15.0 * a1 + 32.0 / 9.0 * a2)
    u1 = y1 + h * (44.0 / 45.0 * b0 - 56.0 / 15.0 * b1 + 32.0 / 9.0 * b2)
    u2 = y2 + h * (44.0 / 45.0 * c0 - 56.0 / 15.0 * c1 + 32.0 / 9.0 * c2)
    a3, b3, c3 = _rhs(mode, x + 0.8 * h, u0, u1, u2, p, kap0, kts, kvs)

    u0 = y0 + h * (19372.0 / 6561.0 * a0 - 25360.0 / 2187.0 * a1
                   + 64448.0 / 6561.0 * a2 - 212.0 / 729.0 * a3)
    u1 = y1 + h * (19372.0 / 6561.0 * b0 - 25360.0 / 2187.0 * b1
                   + 64448.0 / 6561.0 * b2 - 212.0 / 729.0 * b3)
    u2 = y2 + h * (19372.0 / 6561.0 * c0 - 25360.0 / 2187.0 * c1
                   + 64448.0 / 6561.0 * c2 - 212.0 / 729.0 * c3)
    a4, b4, c4 = _rhs(mode, x + 8.0 / 9.0 * h, u0, u1, u2, p, kap0, kts, kvs)

    u0 = y0 + h * (9017.0 / 3168.0 * a0 - 355.0 / 33.0 * a1
                   + 46732.0 / 5247.0 * a2 + 49.0 / 176.0 * a3
                   - 5103.0 / 18656.0 * a4)
    u1 = y1 + h * (9017.0 / 3168.0 * b0 - 355.0 / 33.0 * b1
                   + 46732.0 / 5247.0 * b2 + 49.0 / 176.0 * b3
                   - 5103.0 / 18656.0 * b4)
    u2 = y2 + h * (9017.0 / 3168.0 * c0 - 355.0 / 33.0 * c1
                   + 46732.0 / 5247.0 * c2 + 49.0 / 176.0 * c3
                   - 5103.0 / 18656.0 * c4)
    a5, b5, c5 = _rhs(mode, x + h, u0, u1, u2, p, kap0, kts, kvs)

    z0 = y0 + h * (35.0 / 384.0 * a0 + 500.0 / 1113.0 * a2
                   + 125.0 / 192.0 * a3 - 2187.0 / 6784.0 * a4
                   + 11.0 / 84.0 * a5)
    z1 = y1 + h * (35.0 / 384.0 * b0 + 500.0 / 1113.0 * b2
                   + 125.0 / 192.0 * b3 - 2187.0 / 6784.0 * b4
                   + 11.0 / 84.0 * b5)
    z2 = y2 + h * (35.0 / 384.0 * c0 + 500.0 / 1113.0 * c2
                   + 125.0 / 192.0 * c3 - 2187.0 / 6784.0 * c4
                   + 11.0 / 84.0 * c5)

    d0, d1, d2 = _rhs(mode, x + h, z0, z1, z2, p, kap0, kts, kvs)

    e0 = h * (71.0 / 57600.0 * a0 - 71.0 / 16695.0 * a2 + 71.0 / 1920.0 * a3
              - 17253.0 / 339200.0 * a4 + 22.0 / 525.0 * a5 - 1.0 / 40.0 * d0)
    e1 = h * (71.0 / 57600.0 * b0 - 71.0 / 16695.0 * b2 + 71.0 / 1920.0 * b3
              - 17253.0 / 339200.0 * b4 + 22.0 / 525.0 * b5 - 1.0 / 40.0 * d1)
    e2 = h * (71.0 / 57600.0 * c0 - 71.0 / 16695.0 * c2 + 71.0 / 1920.0 * c3
              - 17253.0 / 339200.0 * c4 + 22.0 / 525.0 * c5 - 1.0 / 40.0 * d2)
    return z0, z1, z2, e0, e1, e2, d0, d1, d2


@njit(cache=True, nogil=True, inline="always")
def _err_norm(e0, e1, e2, y0, y1, y2, z0, z1, z2, rtol, atol):
    s0 = atol + rtol * max(abs(y0), abs(z0))
    s1 = atol + rtol * max(abs(y1), abs(z1))
    s2 = atol + rtol * max(abs(y2), abs(z2))
    q0 = e0 / s0
    q1 = e1 / s1
    q2 = e2 / s2
    return math.sqrt((q0 * q0 + q1 * q1 + q2 * q2) / 3.0)


@njit(cache=True, nogil=True, inline="always")
def _hermite(s, h, y0, f0, y1, f1):
    """Cubic Hermite value at fraction s of a step of width h."""
    s2 = s * s
    s3 = s2 * s
    return ((2.0 * s3 - 3.0 * s2 + 1.0) * y0
            + (s3 - 2.0 * s2 + s) * h * f0
            + (-2.0 * s3 + 3.0 * s2) * y1
            + (s3 - s2) * h * f1)


@njit(cache=True, nogil=True)
def _herm_cross(target, h, y0, f0, y1, f1, s_lo, s_hi):
    """First root s in (s_lo, s_hi] of hermite(s) = target; scan-and-bisect.

    Returns s_hi + 1 when no sign change is found on the range.
    """
    prev = _hermite(s_lo, h, y0, f0, y1, f1)
    for j in range(1, 9):
        s = s_lo + (s_hi - s_lo) * j / 8.0
        cur = _hermite(s, h, y0, f0, y1, f1)
        if (prev - target) * (cur - target) <= 0.0 and prev != cur:
            lo = s_lo + (s_hi - s_lo) * (j - 1) / 8.0
            hi = s
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                vm = _hermite(mid, h, y0, f0, y1, f1)
                if (prev - target) * (vm - target) <= 0.0:
                    hi = mid
                else:
                    lo = mid
            return 0.5 * (lo + hi)
        prev = cur
    return s_hi + 1.0


MIN_H_FRAC = 1e-14


@njit(cache=True, nogil=True)
def advance(v, w, lam_acc, budget, t, t_end, p, kap0, kts, kvs,
            rtol, atol, v_switch, v_explode, h0):
    """Integrate the flow with hazard from time t until the hazard budget is
    spent (a jump), t_end is reached, or blow-up is certain.

    Returns (v, w, lam_acc, t, status, w_max, h_last).
    """
    w_max = w
    h = h0
    if h <= 0.0:
        h = 1e-3
    # ---- t-parametrized phase ----
    while t < t_end:
        if v >= v_switch:
            break
        if h > t_end - t:
            h = t_end - t
        z0, z1, z2, e0, e1, e2, d0, d1, d2 = _dp_step(
            MODE_T, t, v, w, lam_acc, h, p, kap0, kts, kvs)
        bad = not (math.isfinite(z0) and math.isfinite(z1) and math.isfinite(z2))
        if not bad:
            err = _err_norm(e0, e1, e2, v, w, lam_acc, z0, z1, z2, rtol, atol)
        else:
            err = 2.0
        if bad or err > 1.0:
            h *= max(0.2, 0.9 * err ** -0.2) if not bad else 0.2
            if h < MIN_H_FRAC * max(1.0, abs(t)):
                return v, w, lam_acc, t, UNDERFLOW, w_max, h
            continue
        # locate in-step events: hazard budget and v-switch
        f0v, f0w, f0l = _rhs(MODE_T, t, v, w, lam_acc, p, kap0, kts, kvs)
        s_jump = 2.0
        if z2 >= budget:
            s_jump = _herm_cross(budget, h, lam_acc, f0l, z2, d2, 0.0, 1.0)
        s_switch = 2.0
        if z0 >= v_switch and v < v_switch:
            s_switch = _herm_cross(v_switch, h, v, f0v, z0, d0, 0.0, 1.0)
        s_ev = min(s_jump, s_switch)
        if s_ev <= 1.0:
            # re-integrate exactly to the event, then Newton-polish a jump
            h_ev = s_ev * h
            if h_ev > 0.0:
                z0, z1, z2, e0, e1, e2, d0, d1, d2 = _dp_step(
                    MODE_T, t, v, w, lam_acc, h_ev, p, kap0, kts, kvs)
            else:
                z0, z1, z2 = v, w, lam_acc
            t += h_ev
            v, w, lam_acc = z0, z1, z2
            if w > w_max:
                w_max = w
            if s_jump <= s_switch:
                for _ in range(6):
                    lam_here = f_lam(v, p)
                    dt = (budget - lam_acc) / lam_here
                    if abs(dt) < 1e-16 * max(1.0, abs(t)):
                        break
                    z0, z1, z2, e0, e1, e2, d0, d1, d2 = _dp_step(
                        MODE_T, t, v, w, lam_acc, dt, p, kap0, kts, kvs)
                    t += dt
                    v, w, lam_acc = z0, z1, z2
                    if w > w_max:
                        w_max = w
                return v, w, lam_acc, t, JUMPED, w_max, h
            break  # switch to v-parametrized phase
        t += h
        v, w, lam_acc = z0, z1, z2
        if w > w_max:
            w_max = w
        h *= min(5.0, 0.9 * err ** -0.2) if err > 1e-12 else 5.0
    else:
        return v, w, lam_acc, t, REACHED, w_max, h

    # ---- v-parametrized phase (explosive leg) ----
    hv = 0.1
    while v < v_explode:
        if hv > v_explode - v:
            hv = v_explode - v
        z0, z1, z2, e0, e1, e2, d0, d1, d2 = _dp_step(
            MODE_V, v, w, t, lam_acc, hv, p, kap0, kts, kvs)
        bad = not (math.isfinite(z0) and math.isfinite(z1) and math.isfinite(z2))
        if not bad:
            err = _err_norm(e0, e1, e2, w, t, lam_acc, z0, z1, z2, rtol, atol)
        else:
            err = 2.0
        if bad or err > 1.0:
            hv *= max(0.2, 0.9 * err ** -0.2) if not bad else 0.2
            if hv < MIN_H_FRAC * max(1.0, abs(v)):
                return v, w, lam_acc, t, UNDERFLOW, w_max, h
            continue
        f0w, f0t, f0l = _rhs(MODE_V, v, w, t, lam_acc, p, kap0, kts, kvs)
        s_jump = 2.0
        if z2 >= budget:
            s_jump = _herm_cross(budget, hv, lam_acc, f0l, z2, d2, 0.0, 1.0)
        s_tend = 2.0
        if z1 >= t_end:
            s_tend = _herm_cross(t_end, hv, t, f0t, z1, d1, 0.0, 1.0)
        s_ev = min(s_jump, s_tend)
        if s_ev <= 1.0:
            h_ev = s_ev * hv
            if h_ev > 0.0:
                z0, z1, z2, e0, e1, e2, d0, d1, d2 = _dp_step(
                    MODE_V, v, w, t, lam_acc, h_ev, p, kap0, kts, kvs)
            v += h_ev
            w, t, lam_acc = z0, z1, z2
            if w > w_max:
                w_max = w
            if s_jump <= s_tend:
                for _ in range(6):
                    lamv = f_lam(v, p)
                    kap = kappa_at(t, kap0, kts, kvs)
                    dl_dv = lamv / (f_F(v, p) - w + p.I + kap)
                    dv = (budget - lam_acc) / dl_dv
                    if abs(dv) < 1e-16 * max(1.0, abs(v)):
                        break
                    z0, z1, z2, e0, e1, e2, d0, d1, d2 = _dp_step(
                        MODE_V, v, w, t, lam_acc, dv, p, kap0, kts, kvs)
                    v += dv
                    w, t, lam_acc = z0, z1, z2
                return v, w, lam_acc, t, JUMPED, w_max, h
            return v, w, lam_acc, t, REACHED, w_max, h
        v += hv
        w, t, lam_acc = z0, z1, z2
        if w > w_max:
            w_max = w
        hv *= min(5.0, 0.9 * err ** -0.2) if err > 1e-12 else 5.0
    return v, w, lam_acc, t, EXPLODED, w_max, h


@njit(cache=True, nogil=True)
def sample_jump_tau(v, w, t, E, p, kap0, kts, kvs, rtol, atol, v_explode):
    """First-jump sampling by the hazard time change: integrate the
    tau-parametrized system until tau = E.

    Returns (v_pre, w_pre, t_jump, status, w_max).
    """
    w_max = w
    tau = 0.0
    h = min(0.05, E) if E > 0.0 else 0.0
    if h <= 0.0:
        return v, w, t, JUMPED, w_max
    while tau < E:
        if h > E - tau:
            h = E - tau
        z0, z1, z2, e0, e1, e2, d0, d1, d2 = _dp_step(
            MODE_TAU, tau, v, w, t, h, p, kap0, kts, kvs)
        bad = not (math.isfinite(z0) and math.isfinite(z1) and math.isfinite(z2))
        if not bad:
            err = _err_norm(e0, e1, e2, v, w, t, z0, z1, z2, rtol, atol)
        else:
            err = 2.0
        if bad or err > 1.0:
            h *= max(0.2, 0.9 * err ** -0.2) if not bad else 0.2
            if h < 1e-300:
                return v, w, t, UNDERFLOW, w_max
            continue
        tau += h
        v, w, t = z0, z1, z2
        if w > w_max:
            w_max = w
        if v >= v_explode:
            return v, w, t, EXPLODED, w_max
        h *= min(5.0, 0.9 * err ** -0.2) if err > 1e-12 else 5.0
    return v, w, t, JUMPED, w_max


@njit(cache=True, nogil=True)
def chain_steps(w0, n_steps, key, ctr0, p, rtol, atol, v_explode,
                S_out, wpre_out, wmax_out):
    """n_steps of the embedded chain from post-jump adaptation w0 at kappa
    folded into I.  Fills S_n, pre-jump w, and per-step max w arrays.

    Returns (final_w, status, ctr_used).
    """
    kts = np.zeros(0)
    kvs = np.zeros(0)
    w = w0
    for n in range(n_steps):
        E = exp_draw(key, ctr0 + np.uint64(n))
        v1, w1, t1, st, wmx = sample_jump_tau(
            p.v_r, w, 0.0, E, p, 0.0, kts, kvs, rtol, atol, v_explode)
        if st != JUMPED:
            return w, st, np.uint64(n + 1)
        S_out[n] = t1
        wpre_out[n] = w1
        wmax_out[n] = wmx
        w = w1 + p.w_b
    return w, JUMPED, np.uint64(n_steps)


# re-exported for callers that need the chain's sampler one step at a time
@njit(cache=True, nogil=True)
def one_chain_step(w, E, p, rtol, atol, v_explode):
    return sample_jump_tau(p.v_r, w, 0.0, E, p, 0.0, _NO_KNOTS, _NO_KNOTS,
                           rtol, atol, v_explode)


@njit(cache=True, nogil=True)
def chain_step_batch(ws, keys, step, p, rtol, atol, v_explode, out_w,
                     statuses):
    """Advance every path of an ensemble by one post-jump chain step; the
    draw for path i at this step is (keys[i], counter=step)."""
    n = ws.shape[0]
    for i in range(n):
        E = exp_draw(keys[i], np.uint64(step))
        v1, w1, t1, st, wmx = sample_jump_tau(
            p.v_r, ws[i], 0.0, E, p, 0.0, _NO_KNOTS, _NO_KNOTS, rtol, atol,
            v_explode)
        out_w[i] = w1 + p.w_b
        statuses[i] = st


@njit(cache=True, nogil=True)
def thinning_sample(v, w, t0, key, ctr, p, kap0, kts, kvs, rtol, atol,
                    v_switch, v_explode, horizon):
    """Oracle sampler: classical thinning with a per-integrator-step constant
    majorant (rate is nondecreasing in v, so the segment max of v gives the
    majorant).  Fails over to the time-change sampler if the trajectory
    approaches blow-up within the proposal step.

    Returns (v_pre, w_pre, t_jump, status, ctr_used, n_prop, n_acc).
    """
    t = t0
    h = 1e-3
    lam_acc = 0.0  # unused channel, keeps the stepper signature shared
    n_prop = 0
    n_acc = 0
    while t < t0 + horizon:
        if v >= v_switch:
            E = exp_draw(key, ctr)
            ctr += np.uint64(1)
            v1, w1, t1, st, wmx = sample_jump_tau(
                v, w, t, E, p, kap0, kts, kvs, rtol, atol, v_explode)
            return v1, w1, t1, st, ctr, n_prop, n_acc
        z0, z1, z2, e0, e1, e2, d0, d1, d2 = _dp_step(
            MODE_T, t, v, w, lam_acc, h, p, kap0, kts, kvs)
        bad = not (math.isfinite(z0) and math.isfinite(z1))
        if not bad:
            err = _err_norm(e0, e1, e2, v, w, lam_acc, z0, z1, z2, rtol, atol)
        else:
            err = 2.0
        if bad or err > 1.0:
            h *= max(0.2, 0.9 * err ** -0.2) if not bad else 0.2
            if h < MIN_H_FRAC * max(1.0, abs(t)):
                return v, w, t, UNDERFLOW, ctr, n_prop, n_acc
            continue
        f0v, f0w, f0l = _rhs(MODE_T, t, v, w, lam_acc, p, kap0, kts, kvs)
        # majorant over the accepted step: max of v on a Hermite sample
        vmax_seg = max(v, z0)
        for j in range(1, 8):
            vv = _hermite(j / 8.0, h, v, f0v, z0, d0)
            if vv > vmax_seg:
                vmax_seg = vv
        lam_bar = f_lam(vmax_seg, p) * (1.0 + 1e-9) + 1e-300
        sigma = 0.0
        jumped_here = False
        s_jump = 0.0
        while True:
            u = uniform_draw(key, ctr)
            ctr += np.uint64(1)
            sigma += -math.log(u) / lam_bar
            if sigma > h:
                break
            n_prop += 1
            vv = _hermite(sigma / h, h, v, f0v, z0, d0)
            u2 = uniform_draw(key, ctr)
            ctr += np.uint64(1)
            if u2 * lam_bar <= f_lam(vv, p):
                n_acc += 1
                jumped_here = True
                s_jump = sigma
                break
        if jumped_here:
            zz0, zz1, zz2, ee0, ee1, ee2, dd0, dd1, dd2 = _dp_step(
                MODE_T, t, v, w, lam_acc, s_jump, p, kap0, kts, kvs)
            return zz0, zz1, t + s_jump, JUMPED, ctr, n_prop, n_acc
        t += h
        v, w = z0, z1
        h *= min(5.0, 0.9 * err ** -0.2) if err > 1e-12 else 5.0
    return v, w, t, REACHED, ctr, n_prop, n_acc


# -- kernel rows: mass of pre-jump w over a cell grid -------------------------


@njit(cache=True, nogil=True)
def kernel_row_masses(w0, edges, p, kap0, rtol, atol, v_switch, v_explode,
                      masses, t_moment):
    """Mass of (w at the first jump, taken with survival weight) per w-cell,
    for the flow from (v_r, w0) under constant extra current kap0.

    Survival-weighted cell masses telescope exactly: the contribution of a
    piece [a, b] of the trajectory is exp(-Lambda(a)) - exp(-Lambda(b)),
    assigned to the cell containing w on that piece.  Also accumulates the
    mean jump time integral e^{-Lambda} dt into t_moment[0].

    Returns (leaked_low, leaked_high, status).
    """
    kts = np.zeros(0)
    kvs = np.zeros(0)
    n_edges = edges.shape[0]
    v = p.v_r
    w = w0
    t = 0.0
    lam_acc = 0.0
    h = 1e-3
    leak_lo = 0.0
    leak_hi = 0.0
    mode = MODE_T
    x = t
    # generic marching over both parametrized phases
    while True:
        if lam_acc >= LAM_CAP:
            break
        if mode == MODE_T and v >= v_switch:
            mode = MODE_V
            x = v
            h = 0.1
        if mode == MODE_V and x >= v_explode:
            break
        if mode == MODE_T:
            y0, y1, y2 = v, w, lam_acc
        else:
            y0, y1, y2 = w, t, lam_acc
        z0, z1, z2, e0, e1, e2, d0, d1, d2 = _dp_step(
            mode, x, y0, y1, y2, h, p, kap0, kts, kvs)
        bad = not (math.isfinite(z0) and math.isfinite(z1) and math.isfinite(z2))
        if not bad:
            err = _err_norm(e0, e1, e2, y0, y1, y2, z0, z1, z2, rtol, atol)
        else:
            err = 2.0
        if bad or err > 1.0:
            h *= max(0.2, 0.9 * err ** -0.2) if not bad else 0.2
            if h < MIN_H_FRAC * max(1.0, abs(x)):
                return leak_lo, leak_hi, UNDERFLOW
            continue
        f00, f01, f02 = _rhs(mode, x, y0, y1, y2, p, kap0, kts, kvs)
        # walk 8 sub-pieces; within each locate w-cell-edge crossings
        if mode == MODE_T:
            w_a = y1
            lam_a = y2
            fw0, fl0 = f01, f02
            fw1, fl1 = d1, d2
            t_a = x
            ft0, ft1 = 1.0, 1.0
        else:
            w_a = y0
            lam_a = y2
            fw0, fl0 = f00, f02
            fw1, fl1 = d0, d2
            t_a = y1
            ft0, ft1 = f01, d1
        s_prev = 0.0
        w_prev = w_a
        lam_prev = lam_a
        t_prev = t_a
        for j in range(1, 9):
            s_cur = j / 8.0
            if mode == MODE_T:
                w_cur = _hermite(s_cur, h, y1, f01, z1, d1)
                lam_cur = _hermite(s_cur, h, y2, f02, z2, d2)
                t_cur = x + s_cur * h
            else:
                w_cur = _hermite(s_cur, h, y0, f00, z0, d0)
                lam_cur = _hermite(s_cur, h, y2, f02, z2, d2)
                t_cur = _hermite(s_cur, h, y1, f01, z1, d1)
            # deposit over [s_prev, s_cur]: may cross several cell edges
            a_s = s_prev
            a_w = w_prev
            a_lam = lam_prev
            a_t = t_prev
            while True:
                # current cell of a_w
                if a_w < edges[0]:
                    idx = -1
                elif a_w >= edges[n_edges - 1]:
                    idx = n_edges - 1
                else:
                    lo, hi = 0, n_edges - 1
                    while hi - lo > 1:
                        mid = (lo + hi) // 2
                        if edges[mid] <= a_w:
                            lo = mid
                        else:
                            hi = mid
                    idx = lo
                # next edge crossed before s_cur, moving toward w_cur
                target = 0.0
                have_target = False
                if w_cur > a_w:
                    if idx + 1 <= n_edges - 1 and idx + 1 >= 0:
                        if w_cur >= edges[idx + 1] and edges[idx + 1] > a_w:
                            target = edges[idx + 1]
                            have_target = True
                elif w_cur < a_w:
                    if 0 <= idx <= n_edges - 1:
                        if w_cur < edges[idx] and edges[idx] <= a_w:
                            target = edges[idx]
                            have_target = True
                if have_target:
                    if mode == MODE_T:
                        s_t = _herm_cross(target, h, y1, f01, z1, d1, a_s, s_cur)
                    else:
                        s_t = _herm_cross(target, h, y0, f00, z0, d0, a_s, s_cur)
                    if s_t <= a_s or s_t > s_cur:
                        s_t = s_cur
                        have_target = False
                else:
                    s_t = s_cur
                if mode == MODE_T:
                    lam_b = _hermite(s_t, h, y2, f02, z2, d2)
                    t_b = x + s_t * h
                    w_b_loc = _hermite(s_t, h, y1, f01, z1, d1)
                else:
                    lam_b = _hermite(s_t, h, y2, f02, z2, d2)
                    t_b = _hermite(s_t, h, y1, f01, z1, d1)
                    w_b_loc = _hermite(s_t, h, y0, f00, z0, d0)
                dm = math.exp(-a_lam) - math.exp(-lam_b)
                if dm < 0.0:
                    dm = 0.0
                if idx < 0:
                    leak_lo += dm
                elif idx >= n_edges - 1:
                    leak_hi += dm
                else:
                    masses[idx] += dm
                t_moment[0] += 0.5 * (math.exp(-a_lam) + math.exp(-lam_b)) \
                    * (t_b - a_t)
                if not have_target or s_t >= s_cur:
                    break
                a_s = s_t
                a_lam = lam_b
                a_t = t_b
                # nudge across the edge so the cell index flips
                if w_cur > a_w:
                    a_w = target + 1e-14 * max(1.0, abs(target))
                else:
                    a_w = target - 1e-14 * max(1.0, abs(target))
            s_prev = s_cur
            w_prev = w_cur
            lam_prev = lam_cur
            t_prev = t_cur
        x += h
        if mode == MODE_T:
            v, w, lam_acc = z0, z1, z2
            t = x
        else:
            w, t, lam_acc = z0, z1, z2
            v = x
        h *= min(5.0, 0.9 * err ** -0.2) if err > 1e-12 else 5.0
    # residual survival mass sits at the current w
    rem = math.exp(-lam_acc)
    if rem > 0.0:
        if w < edges[0]:
            leak_lo += rem
        elif w >= edges[n_edges - 1]:
            leak_hi += rem
        else:
            lo, hi = 0, n_edges - 1
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if edges[mid] <= w:
                    lo = mid
                else:
                    hi = mid
            masses[lo] += rem
    return leak_lo, leak_hi, REACHED


# -- survival-weighted occupation on a (v, w) grid ----------------------------


@njit(cache=True, nogil=True)
def occupation_deposit(w0, weight, p, kap0, rtol, atol, v_switch, v_explode,
                       v_lo, dv, nv, w_lo, dw, nw, out):
    """Deposit weight * e^{-Lambda(t)} dt along the flow from (v_r, w0) onto
    the (v, w) grid by bilinear splatting.  Returns the survival-time
    integral (the mean jump time from (v_r, w0))."""
    kts = np.zeros(0)
    kvs = np.zeros(0)
    v = p.v_r
    w = w0
    t = 0.0
    lam_acc = 0.0
    h = 1e-3
    total = 0.0
    cell = min(dv, dw)
    mode = MODE_T
    x = t
    while True:
        if lam_acc >= LAM_CAP:
            break
        if mode == MODE_T and v >= v_switch:
            mode = MODE_V
            x = v
            h = 0.1
        if mode == MODE_V and x >= v_explode:
            break
        if mode == MODE_T:
            y0, y1, y2 = v, w, lam_acc
        else:
            y0, y1, y2 = w, t, lam_acc
        z0, z1, z2, e0, e1, e2, d0, d1, d2 = _dp_step(
            mode, x, y0, y1, y2, h, p, kap0, kts, kvs)
        bad = not (math.isfinite(z0) and math.isfinite(z1) and math.isfinite(z2))
        if not bad:
            err = _err_norm(e0, e1, e2, y0, y1, y2, z0, z1, z2, rtol, atol)
        else:
            err = 2.0
        if bad or err > 1.0:
            h *= max(0.2, 0.9 * err ** -0.2) if not bad else 0.2
            if h < MIN_H_FRAC * max(1.0, abs(x)):
                break
            continue
        f00, f01, f02 = _rhs(mode, x, y0, y1, y2, p, kap0, kts, kvs)
        # subdivide so motion per sub-piece stays below one grid cell
        if mode == MODE_T:
            dv_step = abs(z0 - y0)
            dw_step = abs(z1 - y1)
        else:
            dv_step = h
            dw_step = abs(z0 - y0)
        m = int(max(dv_step, dw_step) / (0.9 * cell)) + 1
        if m > 64:
            m = 64
        s_prev = 0.0
        if mode == MODE_T:
            va = y0
            wa = y1
            la = y2
            ta = x
        else:
            va = x
            wa = y0
            la = y2
            ta = y1
        for j in range(1, m + 1):
            s_cur = j / m
            if mode == MODE_T:
                vb = _hermite(s_cur, h, y0, f00, z0, d0)
                wb = _hermite(s_cur, h, y1, f01, z1, d1)
                lb = _hermite(s_cur, h, y2, f02, z2, d2)
                tb = x + s_cur * h
            else:
                vb = x + s_cur * h
                wb = _hermite(s_cur, h, y0, f00, z0, d0)
                lb = _hermite(s_cur, h, y2, f02, z2, d2)
                tb = _hermite(s_cur, h, y1, f01, z1, d1)
            piece = 0.5 * (math.exp(-la) + math.exp(-lb)) * (tb - ta)
            total += piece
            vm = 0.5 * (va + vb)
            wm = 0.5 * (wa + wb)
            gx = (vm - v_lo) / dv
            gy = (wm - w_lo) / dw
            ix = int(math.floor(gx))
            iy = int(math.floor(gy))
            if 0 <= ix < nv - 1 and 0 <= iy < nw - 1:
                fx = gx - ix
                fy = gy - iy
                amt = weight * piece
                out[ix, iy] += amt * (1.0 - fx) * (1.0 - fy)
                out[ix + 1, iy] += amt * fx * (1.0 - fy)
                out[ix, iy + 1] += amt * (1.0 - fx) * fy
                out[ix + 1, iy + 1] += amt * fx * fy
            va, wa, la, ta = vb, wb, lb, tb
            s_prev = s_cur
        x += h
        if mode == MODE_T:
            v, w, lam_acc = z0, z1, z2
            t = x
        else:
            w, t, lam_acc = z0, z1, z2
            v = x
        h *= min(5.0, 0.9 * err ** -0.2) if err > 1e-12 else 5.0
    return total


# -- mean jump time via the time change ---------------------------------------


@njit(cache=True, nogil=True)
def mean_jump_time_tau(v0, w0, p, kap0, rtol, atol, tail_eps):
    """T(w0) = integral of e^{-tau} / lambda(v_hat(tau)) dtau along the
    time-changed flow, truncated where the integrand falls below tail_eps."""
    kts = np.zeros(0)
    kvs = np.zeros(0)
    v = v0
    w = w0
    t = 0.0
    tau = 0.0
    h = 0.05
    total = 0.0
    while True:
        integ = math.exp(-tau) / f_lam(v, p)
        if integ < tail_eps or tau > 200.0:
            break
        z0, z1, z2, e0, e1, e2, d0, d1, d2 = _dp_step(
            MODE_TAU, tau, v, w, t, h, p, kap0, kts, kvs)
        bad = not (math.isfinite(z0) and math.isfinite(z1) and math.isfinite(z2))
        if not bad:
            err = _err_norm(e0, e1, e2, v, w, t, z0, z1, z2, rtol, atol)
        else:
            err = 2.0
        if bad or err > 1.0:
            h *= max(0.2, 0.9 * err ** -0.2) if not bad else 0.2
            if h < 1e-300:
                break
            continue
        # Gauss-Legendre 3-point on the sub-step for the tau-integral
        for gk in range(3):
            if gk == 0:
                sg = 0.5 - math.sqrt(0.15)
                wg = 5.0 / 18.0
            elif gk == 1:
                sg = 0.5
                wg = 8.0 / 18.0
            else:
                sg = 0.5 + math.sqrt(0.15)
                wg = 5.0 / 18.0
            f00, f01, f02 = _rhs(MODE_TAU, tau, v, w, t, p, kap0, kts, kvs)
            vg = _hermite(sg, h, v, f00, z0, d0)
            total += wg * h * math.exp(-(tau + sg * h)) / f_lam(vg, p)
        tau += h
        v, w, t = z0, z1, z2
        h *= min(5.0, 0.9 * err ** -0.2) if err > 1e-12 else 5.0
    return total


# -- batched drivers -----------------------------------------------------------


@njit(cache=True, nogil=True)
def batch_first_jumps(v0s, w0s, key, p, kap0, kts, kvs, rtol, atol,
                      v_explode, T1, vpre, wpre, wmax, Edraws, status):
    n = v0s.shape[0]
    for i in range(n):
        E = exp_draw(key, np.uint64(i))
        Edraws[i] = E
        v1, w1, t1, st, wmx = sample_jump_tau(
            v0s[i], w0s[i], 0.0, E, p, kap0, kts, kvs, rtol, atol, v_explode)
        T1[i] = t1
        vpre[i] = v1
        wpre[i] = w1
        wmax[i] = wmx
        status[i] = st


@njit(cache=True, nogil=True)
def batch_thinning(v0s, w0s, key, p, kap0, kts, kvs, rtol, atol, v_switch,
                   v_explode, horizon, T1, vpre, wpre, status, prop, acc):
    n = v0s.shape[0]
    for i in range(n):
        # one sub-stream per sample: counters cannot collide across samples
        k_i = _mix64((key + np.uint64(i) * _GAMMA) & _MASK)
        v1, w1, t1, st, ctr, npf, nac = thinning_sample(
            v0s[i], w0s[i], 0.0, k_i, np.uint64(0), p, kap0, kts, kvs,
            rtol, atol, v_switch, v_explode, horizon)
        T1[i] = t1
        vpre[i] = v1
        wpre[i] = w1
        status[i] = st
        prop[i] = npf
        acc[i] = nac


@njit(cache=True, nogil=True)
def batch_lambda_on_grid(v0s, w0s, keys, t_grid, p, kap0, kts, kvs, rtol,
                         atol, v_switch, v_explode, sum_lam, sumsq_lam,
                         njumps_out):
    """Evolve one path per (v0, w0, key); record lambda(V_t) at every grid
    time, accumulating sums and squared sums across paths."""
    n = v0s.shape[0]
    ng = t_grid.shape[0]
    for i in range(n):
        v = v0s[i]
        w = w0s[i]
        t = 0.0
        lam_acc = 0.0
        E = exp_draw(keys[i], np.uint64(0))
        ctr = np.uint64(1)
        nj = 0
        h = 1e-3
        for g in range(ng):
            tg = t_grid[g]
            while t < tg:
                v1, w1, l1, t1, st, wmx, h = advance(
                    v, w, lam_acc, E, t, tg, p, kap0, kts, kvs, rtol, atol,
                    v_switch, v_explode, h)
                v, w, lam_acc, t = v1, w1, l1, t1
                if st == JUMPED:
                    v = p.v_r
                    w = w + p.w_b
                    lam_acc = 0.0
                    E = exp_draw(keys[i], ctr)
                    ctr += np.uint64(1)
                    nj += 1
                elif st == REACHED:
                    break
                else:
                    break
            lv = f_lam(v, p)
            sum_lam[g] += lv
            sumsq_lam[g] += lv * lv
        njumps_out[i] = nj


@njit(cache=True, nogil=True, inline="always")
def _rk4_micro(v, w, lam_acc, t, gap, p):
    """One classical RK4 step over a short kick gap (no current knots);
    local error O(gap^5) is far below the adaptive tolerance for the
    sub-millisecond gaps between network deliveries."""
    F1, c1 = f_F_lam(v, p)
    a1 = F1 - w + p.I
    b1 = v - w
    v2 = v + 0.5 * gap * a1
    w2 = w + 0.5 * gap * b1
    F2, c2 = f_F_lam(v2, p)
    a2 = F2 - w2 + p.I
    b2 = v2 - w2
    v3 = v + 0.5 * gap * a2
    w3 = w + 0.5 * gap * b2
    F3, c3 = f_F_lam(v3, p)
    a3 = F3 - w3 + p.I
    b3 = v3 - w3
    v4 = v + gap * a3
    w4 = w + gap * b3
    F4, c4 = f_F_lam(v4, p)
    a4 = F4 - w4 + p.I
    b4 = v4 - w4
    vn = v + gap / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
    wn = w + gap / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
    ln = lam_acc + gap / 6.0 * (c1 + 2.0 * c2 + 2.0 * c3 + c4)
    return vn, wn, ln


@njit(cache=True, nogil=True)
def _advance_neuron(v, w, lam_acc, E, t, t_end, key, ctr, i, p, rtol, atol,
                    v_switch, v_explode, out_t, n_loc, per_cap):
    """One neuron from t to t_end with its own jumps; spike times appended
    to out_t[i].  Returns (v, w, lam, E, ctr, n_loc, status)."""
    h = 1e-3
    while t < t_end:
        gap = t_end - t
        # micro path: single fixed step when the gap is tiny, the hazard
        # cannot plausibly cross, and the state is far from the blow-up leg
        if gap <= 5e-3 and v < v_switch:
            lamv = f_lam(v, p)
            if lamv * gap < 0.2:
                vn, wn, ln = _rk4_micro(v, w, lam_acc, t, gap, p)
                if ln < E and vn < v_switch and math.isfinite(vn):
                    v, w, lam_acc = vn, wn, ln
                    t = t_end
                    break
        v1, w1, l1, tt, st, wmx, h = advance(
            v, w, lam_acc, E, t, t_end, p, 0.0, _NO_KNOTS, _NO_KNOTS, rtol,
            atol, v_switch, v_explode, h)
        v, w, lam_acc, t = v1, w1, l1, tt
        if st == JUMPED:
            if n_loc >= per_cap:
                return v, w, lam_acc, E, ctr, n_loc, UNDERFLOW
            out_t[i, n_loc] = t
            n_loc += 1
            v = p.v_r
            w = w + p.w_b
            lam_acc = 0.0
            E = exp_draw(key, ctr)
            ctr += np.uint64(1)
        elif st == REACHED:
            break
        else:
            return v, w, lam_acc, E, ctr, n_loc, st
    return v, w, lam_acc, E, ctr, n_loc, REACHED


@njit(cache=True, nogil=True, parallel=True)
def network_window(vs, ws, lams, Es, keys, ctrs, t0, t1, kick_ts, kick_em,
                   kick_amt, p, rtol, atol, v_switch, v_explode,
                   out_t, out_n, statuses, per_cap):
    """Advance every neuron through one window (t0, t1] whose deliveries
    (kick_ts sorted, emitters kick_em) are all known in advance; windows
    never exceed the delay, so spikes inside cannot call back.  Neurons are
    independent; the loop parallelizes without any shared accumulation."""
    n = vs.shape[0]
    nk = kick_ts.shape[0]
    for i in prange(n):
        v = vs[i]
        w = ws[i]
        lam_acc = lams[i]
        E = Es[i]
        ctr = ctrs[i]
        t = t0
        n_loc = 0
        st_i = REACHED
        for k in range(nk + 1):
            tk = kick_ts[k] if k < nk else t1
            if tk > t:
                v, w, lam_acc, E, ctr, n_loc, st_i = _advance_neuron(
                    v, w, lam_acc, E, t, tk, keys[i], ctr, i, p, rtol, atol,
                    v_switch, v_explode, out_t, n_loc, per_cap)
                t = tk
                if st_i != REACHED:
                    break
            if k < nk and kick_em[k] != i:
                v += kick_amt
        vs[i] = v
        ws[i] = w
        lams[i] = lam_acc
        Es[i] = E
        ctrs[i] = ctr
        out_n[i] = n_loc
        statuses[i] = st_i


@njit(cache=True, nogil=True)
def mkv_block(vs, ws, lams, Es, keys, ctrs, ts, t_grid, p, kap0, kts, kvs,
              rtol, atol, v_switch, v_explode, sum_lam, sumsq_lam):
    """Advance all copies through the times of t_grid under the piecewise
    linear current (kts, kvs); accumulate lambda statistics per grid node."""
    n = vs.shape[0]
    ng = t_grid.shape[0]
    for i in range(n):
        v = vs[i]
        w = ws[i]
        lam_acc = lams[i]
        E = Es[i]
        t = ts[i]
        h = 1e-3
        for g in range(ng):
            tg = t_grid[g]
            while t < tg:
                v1, w1, l1, tt, st, wmx, h = advance(
                    v, w, lam_acc, E, t, tg, p, kap0, kts, kvs, rtol, atol,
                    v_switch, v_explode, h)
                v, w, lam_acc, t = v1, w1, l1, tt
                if st == JUMPED:
                    v = p.v_r
                    w = w + p.w_b
                    lam_acc = 0.0
                    E = exp_draw(keys[i], ctrs[i])
                    ctrs[i] += np.uint64(1)
                elif st == REACHED:
                    break
                else:
                    break
            lv = f_lam(v, p)
            sum_lam[g] += lv
            sumsq_lam[g] += lv * lv
        vs[i] = v
        ws[i] = w
        lams[i] = lam_acc
        Es[i] = E
        ts[i] = t
