"""Executable checks of the standing hypotheses on (F, lambda).

Six conditions are examined, each with numeric (or analytic, where the
functional form allows it) evidence:

  A1  F strictly convex with steep left slope (< -3) and superquadratic
      right growth;
  A2  divergence of the hazard-over-drift integral (jumps beat blow-up);
  A3/A4/A5  boundedness / decay of lambda * exp(-int lambda/(F+kappa)), and
      the squared-rate variant, uniformly over moderate currents;
  A6  one-sided bound on lambda'(F+alpha) - lambda^2.

Checks over unbounded ranges report "inconclusive" instead of "pass" when
the evidence is not monotone over the last sampled decade.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .model import AdEx, CustomF, ExpRate, ModelSpec, Quartic

__all__ = ["AssumptionReport", "check_assumptions", "InvalidWindow"]

PASS, FAIL, INCONClusive = "pass", "fail", "inconclusive"


class InvalidWindow(ValueError):
    pass


@dataclass
class AssumptionReport:
    verdicts: dict
    evidence: dict = field(default_factory=dict)

    @property
    def all_pass(self) -> bool:
        return all(v == PASS for v in self.verdicts.values())

    def to_doc(self) -> dict:
        def clean(x):
            if isinstance(x, (np.floating, np.integer)):
                return float(x)
            if isinstance(x, np.ndarray):
                return [float(v) for v in x.tolist()]
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            if isinstance(x, (list, tuple)):
                return [clean(v) for v in x]
            return x
        return {"verdicts": dict(self.verdicts),
                "evidence": clean(self.evidence)}


def _growth_verdict(model: ModelSpec) -> tuple[str, dict]:
    """A1(ii): F(v)/v^(2+eps) bounded below by a positive constant."""
    nl = model.nonlinearity
    poly, amps, rates = model._poly_exp()
    has_exp = any(a > 0 and r > 0 for a, r in zip(amps, rates))
    if has_exp:
        # exponential branch dominates every polynomial; no finite growth
        # exponent is assigned
        return PASS, {"branch": "exponential"}
    deg = int(np.nonzero(poly)[0][-1]) if np.any(poly) else 0
    lead = poly[deg] if poly.size else 0.0
    if deg >= 3 and lead > 0:
        return PASS, {"branch": "polynomial", "epsilon_F": float(deg - 2)}
    return FAIL, {"branch": "polynomial", "degree": int(deg),
                  "reason": "growth exponent must exceed 2"}


def _left_slope(model: ModelSpec) -> tuple[str, float]:
    """Limit of F' at -infinity from the closed form."""
    poly, amps, rates = model._poly_exp()
    # exponential pieces with positive rate vanish on the left
    if any(r < 0 for r in rates):
        return INCONClusive, math.nan
    dpoly = np.polynomial.polynomial.polyder(poly) if poly.size > 1 \
        else np.zeros(1)
    deg = int(np.nonzero(dpoly)[0][-1]) if np.any(dpoly) else 0
    if deg == 0:
        lim = float(dpoly[0]) if dpoly.size else 0.0
    else:
        # sign of lead * v^deg as v -> -infinity
        lead = dpoly[deg]
        lim = -math.inf if lead * (-1.0) ** deg < 0 else math.inf
    return (PASS if lim < -3 else FAIL), lim


def check_assumptions(model: ModelSpec, kappa_max: float = 1.0,
                      v_window: tuple[float, float] = (-30.0, 60.0),
                      grid_n: int = 4000) -> AssumptionReport:
    """Per-assumption verdicts with numeric evidence; see module docstring."""
    if grid_n < 100:
        raise ValueError("grid_n >= 100 required")
    v_lo, v_hi = v_window
    if not (v_hi > v_lo) or not np.isfinite([v_lo, v_hi]).all():
        raise InvalidWindow("degenerate v_window")
    verdicts = {}
    evidence = {}

    # ---- A1: convexity + slopes ----
    vg = np.linspace(v_lo, v_hi, grid_n)
    d2 = np.asarray(model.d2F(vg))
    convex = bool(np.all(d2 > -1e-12) and np.max(d2) > 0)
    slope_verdict, slope_lim = _left_slope(model)
    growth_verdict, growth_ev = _growth_verdict(model)
    if not convex:
        verdicts["A1"] = FAIL
    elif FAIL in (slope_verdict, growth_verdict):
        verdicts["A1"] = FAIL
    elif INCONClusive in (slope_verdict, growth_verdict):
        verdicts["A1"] = INCONClusive
    else:
        verdicts["A1"] = PASS
    evidence["A1"] = {"min_F_second_deriv": float(d2.min()),
                      "left_slope_limit": slope_lim,
                      "growth": growth_ev}

    # right tail where F is positive: base point for the integral checks
    vr_grid = np.linspace(max(model.argmin_F() + 0.5, 0.0), v_hi, grid_n)
    Fg = np.asarray(model.F(vr_grid))
    pos = Fg > 0
    if not np.any(pos):
        for name in ("A2", "A3", "A4", "A5"):
            verdicts[name] = INCONClusive
        evidence["A2"] = {"reason": "F not positive on the window"}
    else:
        i0 = int(np.argmax(pos))
        vs = vr_grid[i0:]
        lam = np.asarray(model.lam(vs))

        # ---- A2: divergence of int lambda / F ----
        integrand = lam / np.asarray(model.F(vs))
        part = cumulative_trapezoid(integrand, vs, initial=0.0)
        # decade increments of the partial integral
        n = part.size
        thirds = [part[n // 4], part[n // 2], part[3 * n // 4], part[-1]]
        incr = np.diff(thirds)
        if np.all(incr > 0) and incr[-1] >= 0.5 * incr[0] and part[-1] > 1.0:
            verdicts["A2"] = PASS
        elif incr[-1] < 1e-3 * max(part[-1], 1e-300):
            verdicts["A2"] = FAIL
        else:
            verdicts["A2"] = INCONClusive
        evidence["A2"] = {"partial_integrals": thirds,
                          "window_increments": incr}

        # ---- A3/A4/A5: decay of the survival-weighted rate ----
        for name, power in (("A3", 1), ("A4", 1), ("A5", 2)):
            worst = PASS
            ev = {}
            for kap in (0.0, float(kappa_max)):
                denom = np.asarray(model.F(vs)) + kap
                cum = cumulative_trapezoid(lam / denom, vs, initial=0.0)
                with np.errstate(over="ignore", under="ignore"):
                    H = lam**power * np.exp(-cum)
                tail = H[-grid_n // 10:]
                trend = np.polyfit(vs[-grid_n // 10:],
                                   np.log(np.maximum(tail, 1e-300)), 1)[0]
                ev[f"kappa={kap}"] = {"sup": float(np.nanmax(H)),
                                      "last": float(H[-1]),
                                      "tail_log_slope": float(trend)}
                if name == "A3":
                    ok = PASS if (np.isfinite(H).all() and trend < 1e-3) \
                        else INCONClusive
                elif name == "A4":
                    if trend < -1e-6 and H[-1] < H.max() * 1e-2:
                        ok = PASS
                    elif trend > 1e-3:
                        ok = FAIL
                    else:
                        ok = INCONClusive
                else:
                    if trend < 1e-3 and np.isfinite(H).all():
                        ok = PASS
                    elif trend > 1e-2:
                        ok = FAIL
                    else:
                        ok = INCONClusive
                order = {PASS: 0, INCONClusive: 1, FAIL: 2}
                if order[ok] > order[worst]:
                    worst = ok
            verdicts[name] = worst
            evidence[name] = ev

    # ---- A6: lambda'(F + alpha) - lambda^2 bounded above ----
    ev6 = {}
    worst6 = PASS
    for alpha in (0.0, float(kappa_max)):
        expr = (np.asarray(model.dlam(vg)) * (np.asarray(model.F(vg)) + alpha)
                - np.asarray(model.lam(vg)) ** 2)
        sup = float(np.max(expr))
        k = int(np.argmax(expr))
        tail = expr[-grid_n // 10:]
        rising = tail[-1] > tail[0] + 1e-9 * max(1.0, abs(tail[0]))
        ev6[f"alpha={alpha}"] = {"C_lambda": sup, "argmax_v": float(vg[k]),
                                 "tail_rising": bool(rising)}
        ok = INCONClusive if rising else PASS
        if ok == INCONClusive:
            worst6 = INCONClusive
    verdicts["A6"] = worst6
    evidence["A6"] = ev6

    return AssumptionReport(verdicts=verdicts, evidence=evidence)
