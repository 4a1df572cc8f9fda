"""Nonlinear layer: delay-blocked simulation of the mean-field process,
the stationary residual g(kappa) = kappa E_{mu_kappa}(T1) - J, and Newton
continuation of the self-consistent current kappa(J).

The residual is fully deterministic (kernel pipeline, no Monte Carlo), so
finite-difference Newton sees a smooth function.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import _core
from .dynamics import Partition, ToleranceConfig, build_partition
from .model import ModelSpec, State
from .rng import derive_key
from .stationary import (KernelMatrix, ResetIsEquilibrium, build_kernel,
                         expected_t1, invariant_density)
from .utils import pmap_batches, split_batches

__all__ = [
    "MeanFieldPath", "FixedPointResult", "simulate_mkv",
    "stationary_residual", "solve_fixed_point", "continuation_in_J",
    "NoRoot", "InsufficientCopies",
]


class NoRoot(RuntimeError):
    def __init__(self, msg, scan=None):
        super().__init__(msg)
        self.scan = scan or []


class InsufficientCopies(UserWarning):
    pass


@dataclass
class MeanFieldPath:
    t: np.ndarray            # global time grid over all delay blocks
    kappa: np.ndarray        # J * E lambda(V_{t-D}) used by the simulation
    lam_mean: np.ndarray     # cross-copy average of lambda(V_t)
    stderr: np.ndarray       # MC standard error of kappa (J * se of lambda)
    lam_stderr: np.ndarray   # MC standard error of lam_mean
    M: int
    J: float
    D: float
    block_edges: np.ndarray
    archives: list = field(default_factory=list)  # states entering each block


def simulate_mkv(model: ModelSpec, part: Optional[Partition], mu0,
                 horizon: float, M: int = 10_000, rng=None,
                 nodes_per_block: int = 16,
                 ctrl: ToleranceConfig = ToleranceConfig(),
                 threads: int = 1, archive: bool = True) -> MeanFieldPath:
    """Block-by-block mean-field simulation on [0, horizon].

    On [kD, (k+1)D] the coupling current is known from block k-1:
    kappa(t) = J * (average of lambda over copies at t - D), interpolated
    linearly between block grid nodes; the first block uses the constant
    J * mu0-average of lambda.
    """
    if model.D <= 0:
        raise ValueError("mean-field simulation needs delay D > 0")
    if rng is None:
        raise ValueError("rng=(seed, tag) required")
    seed, tag = rng[0], rng[1]
    D = model.D
    J = model.J
    p = model.compile()
    v_sw = ctrl.v_switch_for(model)

    # initial copies
    init = np.asarray([mu0() if callable(mu0) else mu0 for _ in range(M)],
                      dtype=float)
    vs = np.ascontiguousarray(init[:, 0])
    ws = np.ascontiguousarray(init[:, 1])
    lams = np.zeros(M)
    ts = np.zeros(M)
    keys = np.array([derive_key(seed, f"{tag}/copy", i) for i in range(M)],
                    dtype=np.uint64)
    ctrs = np.zeros(M, dtype=np.uint64)
    Es = np.array([_core.exp_draw(keys[i], np.uint64(0)) for i in range(M)])
    ctrs[:] = 1

    lam0 = float(np.mean(model.lam(vs)))
    se0 = float(np.std(model.lam(vs)) / math.sqrt(M))

    n_blocks = int(math.ceil(horizon / D))
    all_t = [np.array([0.0])]
    all_lam = [np.array([lam0])]
    all_se = [np.array([se0])]
    # current knots for the block being simulated
    kap_ts = np.array([0.0, D])
    kap_vs = np.array([J * lam0, J * lam0])
    archives = []

    def advance_block(t_grid, kts, kvs):
        def run(batch):
            lo, hi = batch
            s1 = np.zeros(t_grid.size)
            s2 = np.zeros(t_grid.size)
            _core.mkv_block(vs[lo:hi], ws[lo:hi], lams[lo:hi], Es[lo:hi],
                            keys[lo:hi], ctrs[lo:hi], ts[lo:hi], t_grid, p,
                            0.0, kts, kvs, ctrl.rel_tol, ctrl.abs_tol, v_sw,
                            ctrl.v_explode, s1, s2)
            return s1, s2
        outs = pmap_batches(run, split_batches(M, 32),
                            threads)
        s1 = np.zeros(t_grid.size)
        s2 = np.zeros(t_grid.size)
        for a, b in outs:
            s1 += a
            s2 += b
        mean = s1 / M
        var = np.maximum(s2 / M - mean**2, 0.0)
        return mean, np.sqrt(var / M)

    for k in range(n_blocks):
        t0 = k * D
        t1 = min((k + 1) * D, horizon)
        t_grid = t0 + (t1 - t0) * np.arange(1, nodes_per_block + 1) \
            / nodes_per_block
        if archive:
            # everything needed to replay this block bit-identically
            archives.append({"t0": float(t0), "t_grid": t_grid.copy(),
                             "v": vs.copy(), "w": ws.copy(),
                             "lam": lams.copy(), "E": Es.copy(),
                             "ctr": ctrs.copy(), "ts": ts.copy(),
                             "keys": keys,
                             "kap_ts": kap_ts.copy(),
                             "kap_vs": kap_vs.copy()})
        lam_mean, lam_se = advance_block(t_grid, kap_ts, kap_vs)
        all_t.append(t_grid)
        all_lam.append(lam_mean)
        all_se.append(lam_se)
        if np.any(lam_se > 0.05 * np.maximum(np.abs(lam_mean), 1e-12)):
            warnings.warn(
                f"block {k}: per-node stderr above 5% of the value; "
                f"increase M", InsufficientCopies)
        # next block's current: this block's lambda curve shifted by D
        kap_ts = np.concatenate(([t0 + D], t_grid + D))
        prev_last = all_lam[-2][-1] if k > 0 else lam0
        kap_vs = J * np.concatenate(([prev_last], lam_mean))

    t_all = np.concatenate(all_t)
    lam_all = np.concatenate(all_lam)
    se_all = np.concatenate(all_se)
    # kappa(t) = J * lambda-average at (t - D), flat before the delay
    kap_curve = J * np.interp(t_all - D, t_all, lam_all,
                              left=lam_all[0])
    return MeanFieldPath(t=t_all, kappa=kap_curve, lam_mean=lam_all,
                         stderr=J * se_all, lam_stderr=se_all, M=M, J=J,
                         D=D,
                         block_edges=np.arange(n_blocks + 1) * D,
                         archives=archives)


def replay_block(model: ModelSpec, entry: dict,
                 ctrl: ToleranceConfig = ToleranceConfig()) -> dict:
    """Re-run one archived mean-field block from its stored entering state;
    the result must be bit-identical to the original pass (the block only
    depends on earlier blocks through the stored current knots)."""
    p = model.compile()
    v_sw = ctrl.v_switch_for(model)
    vs = entry["v"].copy()
    ws = entry["w"].copy()
    lams = entry["lam"].copy()
    Es = entry["E"].copy()
    ctrs = entry["ctr"].copy()
    ts = entry["ts"].copy()
    keys = entry["keys"]
    t_grid = entry["t_grid"]
    M = vs.size
    s1 = np.zeros(t_grid.size)
    s2 = np.zeros(t_grid.size)
    _core.mkv_block(vs, ws, lams, Es, keys, ctrs, ts, t_grid, p, 0.0,
                    entry["kap_ts"], entry["kap_vs"], ctrl.rel_tol,
                    ctrl.abs_tol, v_sw, ctrl.v_explode, s1, s2)
    return {"v": vs, "w": ws, "lam": lams, "E": Es, "ctr": ctrs, "ts": ts,
            "lam_mean": s1 / M}


@dataclass
class FixedPointResult:
    J: float
    kappa: float
    residual: float
    E_T1: float
    converged: bool
    iterations: list = field(default_factory=list)
    fold_suspected: bool = False


@dataclass
class _ResidualPipeline:
    """Deterministic g(kappa) with a partition family shared over the scan
    range (rebuilt only when kappa leaves it)."""

    model: ModelSpec
    ctrl: ToleranceConfig = ToleranceConfig()
    n_w: int = 500
    w_span: float = 40.0
    kappa_max: float = 8.0
    threads: int = 1
    part: Optional[Partition] = None

    def partition_for(self, kappa: float) -> Partition:
        if self.part is None or kappa > self.kappa_max:
            while kappa > self.kappa_max:
                self.kappa_max *= 2.0
            self.part = build_partition(
                self.model, (self.model.I, self.model.I + self.kappa_max),
                ctrl=self.ctrl)
        return self.part

    def __call__(self, kappa: float, J: float) -> tuple[float, float]:
        part = self.partition_for(kappa)
        # the stationary mass rides up with the nullcline as the effective
        # current grows; widen the grid accordingly
        lift = max(0.0, float(self.model.F(self.model.argmin_F()))
                   + self.model.I + kappa - part.w_star)
        w_max = part.w_star + self.w_span + lift
        try:
            K = build_kernel(self.model, part, n_w=self.n_w,
                             w_max=w_max, kappa=kappa,
                             ctrl=self.ctrl, threads=self.threads)
        except ResetIsEquilibrium:
            K = build_kernel(self.model, part, n_w=self.n_w,
                             w_max=w_max, kappa=kappa + 1e-6,
                             ctrl=self.ctrl, threads=self.threads)
        mu = invariant_density(K, self.ctrl)
        e_t1 = expected_t1(self.model, K, mu)
        return kappa * e_t1 - J, e_t1


def stationary_residual(model: ModelSpec, kappa: float, J: float,
                        pipeline: Optional[_ResidualPipeline] = None,
                        ctrl: ToleranceConfig = ToleranceConfig(),
                        n_w: int = 500, threads: int = 1) -> dict:
    """g(kappa) = kappa * E_{mu_kappa}(T1) - J via the deterministic kernel
    pipeline at effective current I + kappa."""
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    pipe = pipeline or _ResidualPipeline(model, ctrl=ctrl, n_w=n_w,
                                         threads=threads)
    g, e_t1 = pipe(float(kappa), float(J))
    return {"g": g, "E_T1": e_t1}


def solve_fixed_point(model: ModelSpec, J: float,
                      ctrl: ToleranceConfig = ToleranceConfig(),
                      kappa0: Optional[float] = None,
                      pipeline: Optional[_ResidualPipeline] = None,
                      fd_step: float = 1e-5, max_iters: int = 50,
                      threads: int = 1) -> FixedPointResult:
    """Newton iteration (finite-difference Jacobian) on g(kappa) = 0."""
    if J < 0:
        raise ValueError("J must be >= 0")
    pipe = pipeline or _ResidualPipeline(model, ctrl=ctrl, threads=threads)
    if J == 0.0:
        g0, e0 = pipe(0.0, 0.0)
        return FixedPointResult(J=0.0, kappa=0.0, residual=g0, E_T1=e0,
                                converged=True, iterations=[(0.0, g0)])
    kap = float(kappa0) if kappa0 is not None else 0.0
    trace = []
    tol = ctrl.root_tol * (1.0 + J)
    g, e_t1 = pipe(kap, J)
    trace.append((kap, g))
    for _ in range(max_iters):
        if abs(g) < tol:
            return FixedPointResult(J=J, kappa=kap, residual=g, E_T1=e_t1,
                                    converged=True, iterations=trace)
        g_h, _ = pipe(kap + fd_step, J)
        dg = (g_h - g) / fd_step
        if not math.isfinite(dg) or dg == 0.0:
            break
        step = -g / dg
        new = kap + step
        if new < 0.0:
            new = 0.5 * kap
        kap = new
        g, e_t1 = pipe(kap, J)
        trace.append((kap, g))
    if abs(g) < tol:
        return FixedPointResult(J=J, kappa=kap, residual=g, E_T1=e_t1,
                                converged=True, iterations=trace)
    # report a residual scan over the bracket for the diagnosis
    scan = []
    for kk in np.linspace(0.0, max(2.0 * kap, 1.0), 9):
        gg, _ = pipe(float(kk), J)
        scan.append((float(kk), gg))
    raise NoRoot(f"no root of the stationary residual found for J={J}",
                 scan=scan)


def continuation_in_J(model: ModelSpec, J_grid: Sequence[float],
                      ctrl: ToleranceConfig = ToleranceConfig(),
                      n_w: int = 500, threads: int = 1,
                      ) -> list[FixedPointResult]:
    """Natural-parameter continuation over an increasing J grid with a
    secant predictor and Newton corrector; per-point failures are recorded
    and the sweep continues."""
    J_grid = [float(j) for j in J_grid]
    if any(b <= a for a, b in zip(J_grid, J_grid[1:])) or J_grid[0] < 0:
        raise ValueError("J_grid must be nonnegative and increasing")
    pipe = _ResidualPipeline(model, ctrl=ctrl, n_w=n_w, threads=threads)
    results: list[FixedPointResult] = []
    for i, J in enumerate(J_grid):
        conv = [r for r in results if r.converged]
        if len(conv) >= 2:
            (J1, k1), (J2, k2) = ((conv[-2].J, conv[-2].kappa),
                                  (conv[-1].J, conv[-1].kappa))
            pred = k2 + (k2 - k1) * (J - J2) / (J2 - J1) if J2 > J1 else k2
            pred = max(pred, 0.0)
        elif conv:
            pred = conv[-1].kappa
        else:
            pred = 0.0
        try:
            res = solve_fixed_point(model, J, ctrl=ctrl, kappa0=pred,
                                    pipeline=pipe, threads=threads)
        except NoRoot as err:
            res = FixedPointResult(J=J, kappa=math.nan, residual=math.nan,
                                   E_T1=math.nan, converged=False,
                                   iterations=list(err.scan),
                                   fold_suspected=True)
        results.append(res)
    return results
