"""Invariant-measure machinery for the autonomous process: transition-kernel
quadrature on a w-grid, invariant densities by power iteration, numeric
Lyapunov / Doeblin certificates, mean jump times, and the lift of the
post-jump law to the continuous-time invariant distribution on the plane.

Kernel rows are survival-weighted cell masses: the trajectory from
(v_r, w0) deposits exp(-Lambda(a)) - exp(-Lambda(b)) into the w-cell it
occupies on [a, b], which makes every row sum to one up to the residual
exp(-Lambda_cap) by telescoping, independent of placement accuracy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _core
from .dynamics import Partition, StepUnderflow, ToleranceConfig, explosion_w_sup
from .model import ModelSpec, State
from .rng import derive_key
from .utils import pmap_batches, split_batches

__all__ = [
    "GridMeasure", "KernelMatrix", "Certificate", "ResetIsEquilibrium",
    "DegenerateJacobian", "NonConvergence", "kernel_row", "build_kernel",
    "invariant_density", "mean_jump_time", "lift_to_plane",
    "verify_lyapunov", "estimate_doeblin", "tv_decay", "choose_w_max",
    "tail_exponent",
]


class ResetIsEquilibrium(RuntimeError):
    """(v_r, v_r) is an equilibrium; the kernel has no density there."""


class DegenerateJacobian(RuntimeError):
    """Kept for callers that guard the t -> w change of variables at
    nullcline tangencies; the survival-mass quadrature used here never
    divides by the w-velocity, so nothing raises this."""


class NonConvergence(RuntimeError):
    pass


@dataclass
class GridMeasure:
    """Density on a bounded uniform w-grid."""

    edges: np.ndarray
    p: np.ndarray          # density per cell (mass / width)
    mass: float = 1.0

    @property
    def w(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def width(self) -> float:
        return float(self.edges[1] - self.edges[0])

    @property
    def masses(self) -> np.ndarray:
        return self.p * self.width

    def normalized(self) -> "GridMeasure":
        tot = float(np.sum(self.p) * self.width)
        return GridMeasure(self.edges, self.p / tot, 1.0)

    def mean(self, values: np.ndarray) -> float:
        return float(np.sum(self.masses * values))


@dataclass
class KernelMatrix:
    """Row-stochastic pre-jump kernel on the w-grid plus quadrature
    metadata.  rows[i, j] = P(w at T1- in cell j | start (v_r, node_i));
    the post-jump chain shifts every row by w_b."""

    edges: np.ndarray
    rows: np.ndarray
    t_mean: np.ndarray         # per-row mean jump time (survival integral)
    leak_low: np.ndarray
    leak_high: np.ndarray
    kappa: float
    w_shift: float
    structural_threshold: float

    @property
    def nodes(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def width(self) -> float:
        return float(self.edges[1] - self.edges[0])

    def chain_matrix(self) -> np.ndarray:
        """Post-jump transition matrix: rows re-binned at w + w_b with the
        uniform-within-cell convention; overflow clipped to the top cell."""
        n = self.rows.shape[1]
        q, frac = divmod(self.w_shift / self.width, 1.0)
        q = int(q)
        M = np.zeros_like(self.rows)
        for j in range(n):
            a = j + q
            if a >= n:
                M[:, n - 1] += self.rows[:, j]
                continue
            M[:, a] += (1.0 - frac) * self.rows[:, j]
            b = a + 1
            if b >= n:
                M[:, n - 1] += frac * self.rows[:, j]
            else:
                M[:, b] += frac * self.rows[:, j]
        return M


@dataclass
class Certificate:
    kind: str                  # Lyapunov | Doeblin | TVDecay | TailExponent
    parameters: dict
    verdict: bool
    evidence: dict = field(default_factory=dict)

    def to_doc(self) -> dict:
        def clean(x):
            if isinstance(x, (np.floating, np.integer)):
                return float(x)
            if isinstance(x, np.ndarray):
                return [clean(v) for v in x.tolist()]
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            if isinstance(x, (list, tuple)):
                return [clean(v) for v in x]
            return x
        return {"kind": self.kind, "parameters": clean(self.parameters),
                "verdict": bool(self.verdict),
                "evidence": clean(self.evidence)}


def _check_regular(model: ModelSpec, kappa: float):
    if abs(model.F(model.v_r) + model.I + kappa - model.v_r) < 1e-9:
        raise ResetIsEquilibrium(
            "reset point is an equilibrium at this current; the kernel "
            "density does not exist (Monte Carlo paths remain available)")


def kernel_row(model: ModelSpec, part: Partition, w0: float,
               edges: np.ndarray, kappa: float = 0.0,
               ctrl: ToleranceConfig = ToleranceConfig()) -> dict:
    """Single kernel row: survival-weighted cell masses of the pre-jump
    adaptation for the flow from (v_r, w0), plus the mean jump time."""
    _check_regular(model, kappa)
    if w0 < part.w_star - 1e-9:
        raise ValueError("w0 below the domain floor w*")
    p = model.compile()
    v_sw = ctrl.v_switch_for(model)
    masses = np.zeros(edges.size - 1)
    tm = np.zeros(1)
    lk_lo, lk_hi, st = _core.kernel_row_masses(
        float(w0), np.ascontiguousarray(edges, float), p, float(kappa),
        ctrl.rel_tol, ctrl.abs_tol, v_sw, ctrl.v_explode, masses, tm)
    if st == _core.UNDERFLOW:
        raise StepUnderflow(f"kernel row stalled at w0={w0}")
    return {"masses": masses, "t_mean": float(tm[0]),
            "leak_low": float(lk_lo), "leak_high": float(lk_hi)}


def build_kernel(model: ModelSpec, part: Partition, n_w: int = 800,
                 w_max: Optional[float] = None, kappa: float = 0.0,
                 ctrl: ToleranceConfig = ToleranceConfig(),
                 threads: int = 1) -> KernelMatrix:
    """Kernel rows from every node of the uniform grid [w*, w* + span]."""
    _check_regular(model, kappa)
    if w_max is None:
        w_max = part.w_star + 40.0
    edges = np.linspace(part.w_star, float(w_max), n_w + 1)
    nodes = 0.5 * (edges[:-1] + edges[1:])
    p = model.compile()
    v_sw = ctrl.v_switch_for(model)

    def run(batch):
        lo, hi = batch
        rows = np.zeros((hi - lo, n_w))
        tms = np.zeros(hi - lo)
        lks = np.zeros((hi - lo, 2))
        tm = np.zeros(1)
        for i in range(hi - lo):
            tm[0] = 0.0
            lk_lo, lk_hi, st = _core.kernel_row_masses(
                float(nodes[lo + i]), edges, p, float(kappa),
                ctrl.rel_tol, ctrl.abs_tol, v_sw, ctrl.v_explode,
                rows[i], tm)
            if st == _core.UNDERFLOW:
                raise StepUnderflow(f"kernel row stalled at node {lo + i}")
            tms[i] = tm[0]
            lks[i, 0] = lk_lo
            lks[i, 1] = lk_hi
        return rows, tms, lks

    out = pmap_batches(run, split_batches(n_w, 32), threads)
    rows = np.vstack([o[0] for o in out])
    t_mean = np.concatenate([o[1] for o in out])
    leaks = np.vstack([o[2] for o in out])
    w_struct = max(part.w23, explosion_w_sup(model.with_current(
        model.I + kappa), part, ctrl))
    return KernelMatrix(edges=edges, rows=rows, t_mean=t_mean,
                        leak_low=leaks[:, 0], leak_high=leaks[:, 1],
                        kappa=float(kappa), w_shift=model.w_b,
                        structural_threshold=float(w_struct))


def invariant_density(kernel: KernelMatrix,
                      ctrl: ToleranceConfig = ToleranceConfig()) -> GridMeasure:
    """Invariant law of the post-jump chain by power iteration of the
    shifted kernel; reports a spectral-gap proxy in the measure's mass
    bookkeeping (residual ratio at convergence)."""
    M = kernel.chain_matrix()
    rs = M.sum(axis=1)
    if np.any(np.abs(rs - 1.0) > 1e-4):
        raise NonConvergence("kernel is not row-stochastic enough to iterate")
    n = M.shape[0]
    mass = np.full(n, 1.0 / n)
    prev_res = None
    gap = math.nan
    for it in range(ctrl.max_iters):
        new = mass @ M
        s = new.sum()
        if s <= 0:
            raise NonConvergence("mass vanished during power iteration")
        new /= s
        res = float(np.abs(new - mass).sum())
        mass = new
        if prev_res is not None and prev_res > 0:
            gap = res / prev_res
        prev_res = res
        if res < ctrl.fp_tol:
            break
    else:
        raise NonConvergence(
            f"power iteration needed more than {ctrl.max_iters} sweeps")
    gm = GridMeasure(kernel.edges, mass / kernel.width, 1.0)
    gm.spectral_gap_proxy = gap
    gm.iterations = it + 1
    return gm


def mean_jump_time(model: ModelSpec, part: Optional[Partition], w0: float,
                   kappa: float = 0.0,
                   ctrl: ToleranceConfig = ToleranceConfig()) -> float:
    """T(w0) = E T1 from (v_r, w0): integral of e^{-tau} / lambda along the
    time-changed flow, truncated once the integrand is below 1e-14."""
    p = model.compile()
    return float(_core.mean_jump_time_tau(
        model.v_r, float(w0), p, float(kappa), ctrl.rel_tol, ctrl.abs_tol,
        1e-14))


def expected_t1(model: ModelSpec, kernel: KernelMatrix, mu: GridMeasure) -> float:
    """E_{mu}(T1) by grid quadrature of the per-node mean jump times."""
    return float(np.sum(mu.masses * kernel.t_mean))


def lift_to_plane(model: ModelSpec, part: Partition, mu_w: GridMeasure,
                  vw_grid: tuple, kappa: float = 0.0,
                  ctrl: ToleranceConfig = ToleranceConfig(),
                  threads: int = 1) -> dict:
    """Continuous-time invariant density on a (v, w) grid: survival-weighted
    occupation of the flow from (v_r, w0), w0 drawn from the post-jump law,
    normalized by the mean jump time.

    vw_grid = (v_lo, v_hi, nv, w_lo, w_hi, nw); returns axes, the density
    array (nv x nw), and the normalization E_{mu}(T1).
    """
    v_lo, v_hi, nv, w_lo, w_hi, nw = vw_grid
    dv = (v_hi - v_lo) / (nv - 1)
    dw = (w_hi - w_lo) / (nw - 1)
    p = model.compile()
    v_sw = ctrl.v_switch_for(model)
    masses = mu_w.masses
    nodes = mu_w.w
    live = np.nonzero(masses > 1e-15)[0]

    def run(batch):
        lo, hi = batch
        H = np.zeros((nv, nw))
        tot = 0.0
        for k in range(lo, hi):
            j = live[k]
            T_j = _core.occupation_deposit(
                float(nodes[j]), float(masses[j]), p, float(kappa),
                ctrl.rel_tol, ctrl.abs_tol, v_sw, ctrl.v_explode,
                v_lo, dv, nv, w_lo, dw, nw, H)
            tot += masses[j] * T_j
        return H, tot

    out = pmap_batches(run, split_batches(live.size, 32),
                       threads)
    H = np.zeros((nv, nw))
    e_t1 = 0.0
    for Hb, tb in out:
        H += Hb
        e_t1 += tb
    H /= e_t1 * dv * dw
    v_axis = v_lo + dv * np.arange(nv)
    w_axis = w_lo + dw * np.arange(nw)
    return {"v": v_axis, "w": w_axis, "density": H, "E_T1": float(e_t1),
            "cell": (dv, dw)}


def verify_lyapunov(model: ModelSpec, part: Partition, kernel: KernelMatrix,
                    r_candidates: Sequence[float]) -> Certificate:
    """Drift inequality (U V)(w0) <= gamma_L V(w0) + K_L for V = e^{r w}
    on the grid.  K_L is fitted on the compact part (w <= w23 + w_b) and
    gamma_L is the worst remaining ratio; pass needs gamma_L < 1.

    Among passing exponents the certificate keeps the largest r: that is
    the sharpest tail bound, which is what the drift condition is for."""
    nodes = kernel.nodes
    best = None
    sweeps = []
    for r in r_candidates:
        if r <= 0:
            raise ValueError("candidates must be positive (r = 0 is the "
                             "degenerate constant function)")
        V = np.exp(r * nodes)
        UV = kernel.rows @ np.exp(r * (nodes + kernel.w_shift))
        compact = nodes <= part.w23 + kernel.w_shift
        K_L = float(UV[compact].max()) if np.any(compact) else 0.0
        with np.errstate(over="ignore"):
            ratios = np.maximum(UV - K_L, 0.0) / V
        gamma = float(ratios.max())
        sweeps.append((float(r), gamma, K_L))
        if gamma < 1.0 and (best is None or r > best[0]):
            best = (float(r), gamma, K_L,
                    int(np.argmax(ratios)))
    if best is None:
        return Certificate(
            kind="Lyapunov", parameters={"r": None}, verdict=False,
            evidence={"sweep": [{"r": r, "gamma_L": g, "K_L": k}
                                for r, g, k in sweeps]})
    r, gamma, K_L, node = best
    return Certificate(
        kind="Lyapunov",
        parameters={"r": r, "gamma_L": gamma, "K_L": K_L},
        verdict=True,
        evidence={"worst_node_w": float(nodes[node]),
                  "sweep": [{"r": rr, "gamma_L": g, "K_L": k}
                            for rr, g, k in sweeps]})


def estimate_doeblin(model: ModelSpec, part: Partition, kernel: KernelMatrix,
                     k_range: Sequence[int],
                     beta_floor: float = 1e-6) -> Certificate:
    """Minorization mass beta(k) = sum_j min_i (M^k)[i, j] of the k-step
    post-jump chain, both over all rows (global condition) and restricted
    to rows with w0 <= 2 w23 (the compact-entry condition).

    Because the rate is positive everywhere, every entry is positive in
    exact arithmetic; a certificate is only declared once beta clears the
    floor, below which the overlap is survival-underflow dust."""
    M = kernel.chain_matrix()
    nodes = kernel.nodes
    restricted = nodes <= 2.0 * part.w23
    Mk = np.eye(M.shape[0])
    results = []
    best = None
    k_sorted = sorted(set(int(k) for k in k_range))
    kk = 0
    profile = None
    for k in k_sorted:
        while kk < k:
            Mk = Mk @ M
            kk += 1
        col_min_global = Mk.min(axis=0)
        col_min_restr = Mk[restricted].min(axis=0) if np.any(restricted) \
            else np.zeros(M.shape[1])
        bg = float(col_min_global.sum())
        br = float(col_min_restr.sum())
        results.append({"k": k, "beta_global": bg, "beta_restricted": br})
        if bg > beta_floor and best is None:
            best = (k, bg)
            profile = col_min_global / bg
    if best is None:
        return Certificate(kind="Doeblin", parameters={"k_D": None},
                           verdict=False, evidence={"beta": results})
    k_D, beta = best
    # the constructed reference measure: uniform mixture over
    # u in (w23, 2 w23) of the one-jump law from (v_r, u + w_b); its first
    # marginal provably charges (w23 + 2 w_b, 2 w23 + 2 w_b)
    mix = (nodes > part.w23 + kernel.w_shift) \
        & (nodes <= 2.0 * part.w23 + kernel.w_shift)
    nu_cons = M[mix].mean(axis=0) if np.any(mix) else np.zeros(M.shape[1])
    lo = float(part.w23 + 2 * kernel.w_shift)
    hi = float(2 * part.w23 + 2 * kernel.w_shift)
    band = (nodes >= lo) & (nodes <= hi)
    band_mass = float(nu_cons[band].sum())
    return Certificate(
        kind="Doeblin",
        parameters={"k_D": int(k_D), "beta_D": beta},
        verdict=True,
        evidence={"beta": results,
                  "profile_nodes": kernel.nodes,
                  "profile": profile,
                  "reference_construction": nu_cons,
                  "band_mass_w23p2wb_2w23p2wb": band_mass})


def tv_decay(model: ModelSpec, part: Partition, w_pair: tuple[float, float],
             n_steps: int, n_paths: int, seed: int,
             ctrl: ToleranceConfig = ToleranceConfig(),
             n_bins: int = 64, threads: int = 1) -> Certificate:
    """Empirical TV decay: two ensembles of the post-jump chain from Dirac
    starts, per-step L1 histogram distance on common bins, and an OLS fit
    of the geometric ratio.  Pass when the 95% band of the ratio sits
    strictly below 1."""
    p = model.compile()
    wa = np.full(n_paths, float(w_pair[0]))
    wb = np.full(n_paths, float(w_pair[1]))
    edges = None
    dists = []

    keys_a = np.array([derive_key(seed, "tv/a", i) for i in range(n_paths)],
                      dtype=np.uint64)
    keys_b = np.array([derive_key(seed, "tv/b", i) for i in range(n_paths)],
                      dtype=np.uint64)

    def step_ensemble(ws, keys, step):
        def run(batch):
            lo, hi = batch
            out = np.empty(hi - lo)
            stt = np.empty(hi - lo, dtype=np.int64)
            _core.chain_step_batch(ws[lo:hi], keys[lo:hi], step, p,
                                   ctrl.rel_tol, ctrl.abs_tol,
                                   ctrl.v_explode, out, stt)
            if np.any(stt != _core.JUMPED):
                raise StepUnderflow("chain step failed")
            return out
        res = pmap_batches(run, split_batches(n_paths, 32), threads)
        return np.concatenate(res)

    for step in range(n_steps):
        wa = step_ensemble(wa, keys_a, step)
        wb = step_ensemble(wb, keys_b, step)
        if edges is None:
            lo = min(wa.min(), wb.min())
            hi = max(wa.max(), wb.max()) + 4.0 * model.w_b
            edges = np.linspace(lo, hi, n_bins + 1)
        ha = np.histogram(wa, bins=edges)[0] / n_paths
        hb = np.histogram(wb, bins=edges)[0] / n_paths
        dists.append(float(np.abs(ha - hb).sum()))
    d = np.asarray(dists)

    floor = math.sqrt(8.0 * n_bins / (math.pi * n_paths))
    usable = np.nonzero(d > 3.0 * floor)[0]
    ratio = math.nan
    ci = (math.nan, math.nan)
    ok = False
    if usable.size >= 3:
        ks = usable.astype(float)
        ys = np.log(d[usable])
        A = np.vstack([np.ones_like(ks), ks]).T
        coef, res_, rank_, sv_ = np.linalg.lstsq(A, ys, rcond=None)
        fit = A @ coef
        dof = max(1, ks.size - 2)
        s2 = float(np.sum((ys - fit) ** 2)) / dof
        sxx = float(np.sum((ks - ks.mean()) ** 2))
        se = math.sqrt(s2 / sxx) if sxx > 0 else math.inf
        slope = float(coef[1])
        ratio = math.exp(slope)
        ci = (math.exp(slope - 1.96 * se), math.exp(slope + 1.96 * se))
        ok = ci[1] < 1.0
    return Certificate(
        kind="TVDecay",
        parameters={"ratio": ratio, "ci95": list(ci),
                    "steps_used": int(usable.size)},
        verdict=ok,
        evidence={"distances": d, "noise_floor": floor,
                  "w_pair": list(w_pair), "n_paths": n_paths})


def tail_exponent(mu: GridMeasure, decade_fraction: float = 0.35) -> Certificate:
    """Regression of log of the upper-tail mass over the last stretch of the
    grid with positive density; pass needs negative slope with R^2 > 0.95."""
    masses = mu.masses
    tail = np.cumsum(masses[::-1])[::-1]
    pos = np.nonzero(tail > tail[0] * 1e-12)[0]
    if pos.size < 10:
        return Certificate(kind="TailExponent", parameters={"slope": None},
                           verdict=False, evidence={"reason": "tail too short"})
    hi = pos[-1]
    lo = max(0, hi - int(decade_fraction * masses.size))
    xs = mu.w[lo:hi]
    ys = np.log(tail[lo:hi])
    A = np.vstack([np.ones_like(xs), xs]).T
    coef, *_ = np.linalg.lstsq(A, ys, rcond=None)
    fit = A @ coef
    ss_res = float(np.sum((ys - fit) ** 2))
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    slope = float(coef[1])
    return Certificate(kind="TailExponent",
                       parameters={"slope": slope, "r_squared": r2},
                       verdict=(slope < 0 and r2 > 0.95),
                       evidence={"window_w": [float(xs[0]), float(xs[-1])]})


def choose_w_max(model: ModelSpec, part: Partition,
                 ctrl: ToleranceConfig = ToleranceConfig(),
                 pilot_n_w: int = 200, rel_tail: float = 1e-8) -> float:
    """Grid truncation from a pilot Lyapunov pass: smallest span with
    e^{-r span} below the requested relative tail budget, r the sharpest
    certified drift exponent."""
    pilot = build_kernel(model, part, n_w=pilot_n_w,
                         w_max=part.w_star + 40.0, ctrl=ctrl)
    cert = verify_lyapunov(model, part, pilot,
                           np.geomspace(1e-3, 1.0, 20))
    r = cert.parameters.get("r") or 0.5
    span = -math.log(rel_tail) / r
    span = min(max(span, 12.0 * model.w_b), 120.0)
    return float(part.w_star + span)
