"""The linearized jump process: path simulation by iterated first-jump
sampling, the embedded (post-jump) Markov chain, and the deterministic
Volterra solver for the expected jump rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _core
from .dynamics import Partition, StepUnderflow, ToleranceConfig
from .hazard import HazardExhausted, _kappa_pack
from .model import ModelSpec, State
from .rng import derive_key, exponentials
from .utils import pmap_batches, split_batches

__all__ = [
    "JumpRecord", "LinearPath", "RateGridSolution", "simulate_linear",
    "simulate_embedded_chain", "solve_rate_volterra", "NonConvergence",
    "estimate_lambda_curve",
]

MAX_JUMPS = 1_000_000


class NonConvergence(RuntimeError):
    pass


@dataclass
class JumpRecord:
    """Jump times, inter-jump durations and post-jump adaptation values."""

    s0: float
    x0: State
    T: np.ndarray       # jump times T_1 < T_2 < ...
    S: np.ndarray       # durations S_n = T_n - T_{n-1}
    w: np.ndarray       # post-jump adaptation after jump n
    w_pre: np.ndarray   # adaptation just before jump n
    w_max: np.ndarray = field(default=None)  # per-cycle max of w

    def __len__(self):
        return self.T.size


@dataclass
class LinearPath:
    model: ModelSpec
    record: JumpRecord
    horizon: float
    ctrl: ToleranceConfig
    kappa_pack: tuple

    def state(self, t: float) -> State:
        """Dense path query by re-integration inside the owning segment."""
        if t < self.record.s0 or t > self.horizon:
            raise ValueError("query outside the simulated window")
        T = self.record.T
        n = int(np.searchsorted(T, t, side="right"))
        if n == 0:
            t0, x = self.record.s0, self.record.x0
        else:
            t0 = float(T[n - 1])
            x = State(self.model.v_r, float(self.record.w[n - 1]))
        p = self.model.compile()
        kap0, kts, kvs = self.kappa_pack
        v_sw = self.ctrl.v_switch_for(self.model)
        v, w, lam, tt, st, wmx, _h = _core.advance(
            x.v, x.w, 0.0, math.inf, t0, float(t), p, kap0, kts, kvs,
            self.ctrl.rel_tol, self.ctrl.abs_tol, v_sw, self.ctrl.v_explode,
            1e-3)
        if st != _core.REACHED:
            raise StepUnderflow("path query failed")
        return State(float(v), float(w))


def simulate_linear(model: ModelSpec, part: Optional[Partition], init,
                    kappa=0.0, horizon: float = 100.0, rng=None,
                    ctrl: ToleranceConfig = ToleranceConfig()) -> LinearPath:
    """Path of the jump process on [0, horizon] from a fixed state (or a
    callable sampler) by alternating flow integration and exact first-jump
    sampling."""
    if rng is None:
        raise ValueError("rng=(seed, tag, stream) required")
    seed, tag, stream = rng
    key = np.uint64(derive_key(seed, tag, stream))
    x = init() if callable(init) else State(float(init[0]), float(init[1]))
    p = model.compile()
    kap0, kts, kvs = _kappa_pack(kappa)

    Ts, Ss, ws, wpres, wmaxs = [], [], [], [], []
    t = 0.0
    v, w = x.v, x.w
    ctr = 0
    while t < horizon and len(Ts) < MAX_JUMPS:
        E = _core.exp_draw(key, np.uint64(ctr))
        ctr += 1
        v1, w1, t1, st, wmx = _core.sample_jump_tau(
            v, w, t, E, p, kap0, kts, kvs, ctrl.rel_tol, ctrl.abs_tol,
            ctrl.v_explode)
        if st == _core.UNDERFLOW:
            raise StepUnderflow("first-jump integration stalled")
        if st == _core.EXPLODED:
            raise HazardExhausted("hazard did not diverge before blow-up")
        if t1 > horizon:
            break
        Ts.append(t1)
        Ss.append(t1 - t)
        wpres.append(w1)
        wmaxs.append(wmx)
        w = w1 + model.w_b
        v = model.v_r
        ws.append(w)
        t = t1
    if len(Ts) >= MAX_JUMPS:
        raise NonConvergence(
            f"jump count exceeded the regularity cap {MAX_JUMPS} before the "
            f"horizon; diagnostic: last T={t:.6g}")
    rec = JumpRecord(s0=0.0, x0=x, T=np.asarray(Ts), S=np.asarray(Ss),
                     w=np.asarray(ws), w_pre=np.asarray(wpres),
                     w_max=np.asarray(wmaxs))
    return LinearPath(model=model, record=rec, horizon=horizon, ctrl=ctrl,
                      kappa_pack=(kap0, kts, kvs))


def simulate_embedded_chain(model: ModelSpec, part: Optional[Partition],
                            w0: float, n_steps: int, rng=None,
                            ctrl: ToleranceConfig = ToleranceConfig()
                            ) -> JumpRecord:
    """n_steps of the post-jump chain (w_n, S_n) from adaptation w0 with
    kappa folded into the model current; O(1) memory beyond the record."""
    if rng is None:
        raise ValueError("rng=(seed, tag, stream) required")
    seed, tag, stream = rng
    key = np.uint64(derive_key(seed, tag, stream))
    p = model.compile()
    S = np.empty(n_steps)
    wpre = np.empty(n_steps)
    wmax = np.empty(n_steps)
    wfin, st, used = _core.chain_steps(
        float(w0), int(n_steps), key, np.uint64(0), p,
        ctrl.rel_tol, ctrl.abs_tol, ctrl.v_explode, S, wpre, wmax)
    if st == _core.UNDERFLOW:
        raise StepUnderflow(f"chain stalled at step {int(used)}")
    if st == _core.EXPLODED:
        raise HazardExhausted(f"chain ran out of hazard at step {int(used)}")
    T = np.cumsum(S)
    w = wpre + model.w_b
    return JumpRecord(s0=0.0, x0=State(model.v_r, float(w0)), T=T, S=S,
                      w=w, w_pre=wpre, w_max=wmax)


def estimate_lambda_curve(model: ModelSpec, x0: State, t_grid, n_paths: int,
                          seed: int, tag: str = "pdmp/mc", kappa=0.0,
                          ctrl: ToleranceConfig = ToleranceConfig(),
                          threads: int = 1) -> dict:
    """Monte Carlo estimate of E lambda(V_t) on a time grid from n_paths
    independent paths started at x0.  Deterministic for fixed seed
    regardless of the thread count (streams are indexed by path)."""
    p = model.compile()
    kap0, kts, kvs = _kappa_pack(kappa)
    t_grid = np.ascontiguousarray(t_grid, float)
    v_sw = ctrl.v_switch_for(model)
    base = derive_key(seed, tag, 0)

    def run(batch):
        lo, hi = batch
        nb = hi - lo
        keys = np.empty(nb, dtype=np.uint64)
        for i in range(nb):
            keys[i] = derive_key(seed, tag, lo + i)
        v0s = np.full(nb, float(x0[0]))
        w0s = np.full(nb, float(x0[1]))
        s1 = np.zeros(t_grid.size)
        s2 = np.zeros(t_grid.size)
        nj = np.zeros(nb, dtype=np.int64)
        _core.batch_lambda_on_grid(v0s, w0s, keys, t_grid, p, kap0, kts, kvs,
                                   ctrl.rel_tol, ctrl.abs_tol, v_sw,
                                   ctrl.v_explode, s1, s2, nj)
        return s1, s2, int(nj.sum())

    parts = split_batches(n_paths, 32)
    out = pmap_batches(run, parts, threads)
    sum1 = np.zeros(t_grid.size)
    sum2 = np.zeros(t_grid.size)
    njumps = 0
    for s1, s2, nj in out:
        sum1 += s1
        sum2 += s2
        njumps += nj
    mean = sum1 / n_paths
    var = np.maximum(sum2 / n_paths - mean**2, 0.0)
    stderr = np.sqrt(var / n_paths)
    return {"t": t_grid, "mean_lambda": mean, "stderr": stderr,
            "n_jumps": njumps}


# -- Volterra solver for the jump rate ----------------------------------------


@dataclass
class RateGridSolution:
    """Jump rate r(s, x, t) on the simplex s <= t (time-homogeneous current,
    so values depend on t - s only), with the first-jump density alongside.

    r2 (the second-moment rate, E lambda^2) is a diagnostic only, filled on
    request; it is not a supported solver output."""

    s_grid: np.ndarray
    t_grid: np.ndarray
    r: np.ndarray          # r[a, b] = rate at (s_a, t_b); nan below diagonal
    p: np.ndarray
    x0: State
    lattice_w: np.ndarray
    rho: np.ndarray        # reset-line solution on (lattice, duration) grid
    durations: np.ndarray
    iterations: int
    r2: Optional[np.ndarray] = None   # duration curve, diagnostic

    def r_of_t(self) -> np.ndarray:
        """Row s = s_grid[0] as a plain duration curve."""
        return self.r[0]


def _flow_tables(model: ModelSpec, w_starts: np.ndarray, durations: np.ndarray,
                 kap0: float, ctrl: ToleranceConfig, threads: int = 1):
    """Flow-and-hazard tables from every lattice start (v_r, w_i): the
    first-jump density p and survival exp(-Lambda) at the duration nodes,
    plus the post-jump target w + w_b at nodes and at interval midpoints.

    The survival values make the per-interval jump masses exact by
    telescoping, which the renewal quadrature relies on (the density has a
    sharp integrable spike near blow-up that node sampling cannot see).
    """
    p = model.compile()
    kts = np.zeros(0)
    kvs = np.zeros(0)
    v_sw = ctrl.v_switch_for(model)
    nd = durations.size
    # sample nodes and midpoints in one sweep
    fine = np.empty(2 * nd - 1)
    fine[0::2] = durations
    fine[1::2] = 0.5 * (durations[:-1] + durations[1:])

    def run(batch):
        lo, hi = batch
        pv = np.zeros((hi - lo, nd))
        sv = np.zeros((hi - lo, nd))
        wh = np.zeros((hi - lo, nd))
        wm = np.zeros((hi - lo, nd - 1))
        for i in range(hi - lo):
            v = model.v_r
            w = float(w_starts[lo + i])
            lam = 0.0
            t = 0.0
            alive = True
            h = 1e-3
            for m, tm in enumerate(fine):
                if alive and tm > t:
                    v1, w1, l1, t1, st, wmx, h = _core.advance(
                        v, w, lam, math.inf, t, float(tm), p, kap0, kts, kvs,
                        ctrl.rel_tol, ctrl.abs_tol, v_sw, ctrl.v_explode, h)
                    v, w, lam, t = v1, w1, l1, t1
                    if st != _core.REACHED:
                        alive = False
                node, mid = divmod(m, 2)
                if mid == 0:
                    sv[i, node] = math.exp(-lam) if alive else 0.0
                    if alive and lam < _core.LAM_CAP:
                        pv[i, node] = model.lam(v) * math.exp(-lam)
                    wh[i, node] = w + model.w_b
                else:
                    wm[i, node] = w + model.w_b
        return pv, sv, wh, wm

    parts = split_batches(w_starts.size, max(1, min(16, w_starts.size)))
    out = pmap_batches(run, parts, threads)
    return (np.vstack([o[0] for o in out]), np.vstack([o[1] for o in out]),
            np.vstack([o[2] for o in out]), np.vstack([o[3] for o in out]))


def solve_rate_volterra(model: ModelSpec, part: Partition, x: State,
                        kappa: float, t_grid,
                        ctrl: ToleranceConfig = ToleranceConfig(),
                        n_lattice: int = 160, lattice_wmax: float = None,
                        threads: int = 1,
                        second_moment: bool = False) -> RateGridSolution:
    """Picard iteration of the renewal equation for the jump rate,
    r = p + p * (r after reset), closed on the reset line via a w-lattice
    and extended to x by one application of the equation.

    kappa must be constant here (the rate is then time homogeneous); the
    returned object still carries the full (s, t) simplex.  With
    second_moment the squared-rate analogue is iterated too and attached
    as the r2 diagnostic.
    """
    if callable(kappa) or isinstance(kappa, tuple):
        raise NotImplementedError(
            "the Volterra solver covers constant currents")
    kap0 = float(kappa)
    t_grid = np.ascontiguousarray(t_grid, float)
    if t_grid[0] != 0.0:
        raise ValueError("t_grid must start at 0")
    dur = t_grid - t_grid[0]
    if np.any(np.abs(np.diff(dur) - (dur[1] - dur[0])) > 1e-9 * dur[-1]):
        raise ValueError("uniform t_grid required (trapezoid quadrature)")
    ht = dur[1] - dur[0]
    nd = dur.size

    if lattice_wmax is None:
        lattice_wmax = part.w_star + 45.0
    lat = np.linspace(part.w_star, lattice_wmax, n_lattice)
    pval, surv, what, wmid = _flow_tables(model, lat, dur, kap0, ctrl,
                                          threads)
    # exact jump mass of every duration interval, by telescoping survival
    mass = surv[:, :-1] - surv[:, 1:]

    # interpolation stencil of the midpoint post-jump target on the lattice
    dlat = lat[1] - lat[0]
    pos = np.clip((wmid - lat[0]) / dlat, 0.0, n_lattice - 1 - 1e-12)
    idx = pos.astype(np.int64)
    frac = pos - idx

    def convolve(rho, mass_x, idx_x, frac_x, m):
        """sum_j mass[j] * rho(w_mid[j], m - j - 1/2), the product-integration
        form of the renewal convolution up to duration node m."""
        cols = m - 1 - np.arange(m)
        a = rho[idx_x[..., :m], cols]
        b = rho[np.minimum(idx_x[..., :m] + 1, n_lattice - 1), cols]
        vals_lo = (1.0 - frac_x[..., :m]) * a + frac_x[..., :m] * b
        cols2 = np.minimum(cols + 1, nd - 1)
        a2 = rho[idx_x[..., :m], cols2]
        b2 = rho[np.minimum(idx_x[..., :m] + 1, n_lattice - 1), cols2]
        vals_hi = (1.0 - frac_x[..., :m]) * a2 + frac_x[..., :m] * b2
        return (mass_x[..., :m] * 0.5 * (vals_lo + vals_hi)).sum(axis=-1)

    rho = pval.copy()
    it = 0
    for it in range(1, ctrl.max_iters + 1):
        rho_new = pval.copy()
        for m in range(1, nd):
            rho_new[:, m] += convolve(rho, mass, idx, frac, m)
        diff = float(np.max(np.abs(rho_new - rho)))
        rho = rho_new
        if diff < ctrl.fp_tol:
            break
    else:
        raise NonConvergence(
            f"Picard did not reach {ctrl.fp_tol} in {ctrl.max_iters} sweeps")

    # extend to the requested start state by one application of the equation
    if abs(float(x[0]) - model.v_r) < 1e-12:
        px, sx, whx, wmx = _flow_tables(model, np.array([float(x[1])]), dur,
                                        kap0, ctrl)
    else:
        px, sx, whx, wmx = _flow_tables_state(model, x, dur, kap0, ctrl)
    mass_x = sx[0, :-1] - sx[0, 1:]
    posx = np.clip((wmx[0] - lat[0]) / dlat, 0.0, n_lattice - 1 - 1e-12)
    idxx = posx.astype(np.int64)
    fracx = posx - idxx
    r_dur = px[0].copy()
    for m in range(1, nd):
        r_dur[m] += float(convolve(rho, mass_x, idxx, fracx, m))

    r2_dur = None
    if second_moment:
        # same renewal kernel, squared-rate inhomogeneous term:
        # p2 = lambda^2 e^{-Lambda} = p^2 / survival
        with np.errstate(divide="ignore", invalid="ignore"):
            p2 = np.where(surv > 0.0, pval * pval / surv, 0.0)
            p2x = np.where(sx[0] > 0.0, px[0] * px[0] / sx[0], 0.0)
        rho2 = p2.copy()
        for _ in range(1, ctrl.max_iters + 1):
            rho2_new = p2.copy()
            for m in range(1, nd):
                rho2_new[:, m] += convolve(rho2, mass, idx, frac, m)
            diff = float(np.max(np.abs(rho2_new - rho2)))
            rho2 = rho2_new
            if diff < ctrl.fp_tol * max(1.0, float(np.max(np.abs(rho2)))):
                break
        r2_dur = p2x.copy()
        for m in range(1, nd):
            r2_dur[m] += float(convolve(rho2, mass_x, idxx, fracx, m))

    # simplex fill: homogeneous in t - s
    r_grid = np.full((nd, nd), np.nan)
    p_grid = np.full((nd, nd), np.nan)
    for a in range(nd):
        r_grid[a, a:] = r_dur[:nd - a]
        p_grid[a, a:] = px[0, :nd - a]
    return RateGridSolution(s_grid=t_grid, t_grid=t_grid, r=r_grid, p=p_grid,
                            x0=State(float(x[0]), float(x[1])), lattice_w=lat,
                            rho=rho, durations=dur, iterations=it,
                            r2=r2_dur)


def _flow_tables_state(model: ModelSpec, x: State, durations: np.ndarray,
                       kap0: float, ctrl: ToleranceConfig):
    """Like _flow_tables but for one arbitrary start state."""
    p = model.compile()
    kts = np.zeros(0)
    kvs = np.zeros(0)
    v_sw = ctrl.v_switch_for(model)
    nd = durations.size
    fine = np.empty(2 * nd - 1)
    fine[0::2] = durations
    fine[1::2] = 0.5 * (durations[:-1] + durations[1:])
    pv = np.zeros((1, nd))
    sv = np.zeros((1, nd))
    wh = np.zeros((1, nd))
    wm = np.zeros((1, nd - 1))
    v, w = float(x[0]), float(x[1])
    lam = 0.0
    t = 0.0
    alive = True
    h = 1e-3
    for m, tm in enumerate(fine):
        if alive and tm > t:
            v1, w1, l1, t1, st, wmx, h = _core.advance(
                v, w, lam, math.inf, t, float(tm), p, kap0, kts, kvs,
                ctrl.rel_tol, ctrl.abs_tol, v_sw, ctrl.v_explode, h)
            v, w, lam, t = v1, w1, l1, t1
            if st != _core.REACHED:
                alive = False
        node, mid = divmod(m, 2)
        if mid == 0:
            sv[0, node] = math.exp(-lam) if alive else 0.0
            if alive and lam < _core.LAM_CAP:
                pv[0, node] = model.lam(v) * math.exp(-lam)
            wh[0, node] = w + model.w_b
        else:
            wm[0, node] = w + model.w_b
    return pv, sv, wh, wm
