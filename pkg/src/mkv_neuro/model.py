"""Model definition: vector field F, spike rate function, scalar parameters.

The drift of the membrane potential is ``F(v) - w + I + kappa`` and the
adaptation drifts as ``v - w``.  A spike resets ``(v, w) -> (v_r, w + w_b)``.
Every nonlinearity is stored in one canonical form,

    F(v) = sum_k poly[k] v^k  +  sum_j amp_j exp(rate_j v),

which covers the exponential and quartic families as well as user-supplied
polynomial/exponential tables, and compiles to a flat numeric pack consumed
by the jitted simulation core.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

# exp() argument cap; keeps trial integrator steps finite past any
# termination event without affecting values that matter (e^500 ~ 1e217)
EXP_CAP = 500.0


class State(NamedTuple):
    v: float
    w: float


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ExpRate:
    """Spike rate lambda(v) = exp(v + K)."""

    K: float = 0.0


@dataclass(frozen=True)
class TabulatedRate:
    """Monotone tabulated rate; linear interpolation inside the table,
    constant below, last-slope linear continuation above."""

    v_nodes: tuple[float, ...]
    lam_nodes: tuple[float, ...]

    def __post_init__(self):
        v = np.asarray(self.v_nodes, float)
        lam = np.asarray(self.lam_nodes, float)
        if v.ndim != 1 or v.size < 2 or v.size != lam.size:
            raise ModelError("tabulated rate needs matching 1-D tables, >= 2 nodes")
        if np.any(np.diff(v) <= 0):
            raise ModelError("tabulated rate: v nodes must increase")
        if np.any(lam <= 0):
            raise ModelError("rate function must be positive")
        if np.any(np.diff(lam) < 0):
            raise ModelError("rate function must be nondecreasing")


@dataclass(frozen=True)
class AdEx:
    """F(v) = exp(v) - a*v + shift."""

    a: float
    shift: float = 0.0


@dataclass(frozen=True)
class Quartic:
    """F(v) = v^4 + 2*a*v."""

    a: float


@dataclass(frozen=True)
class CustomF:
    """Polynomial + exponential nonlinearity, convexity asserted by the user.

    F(v) = sum poly[k] v^k + sum amps[j] exp(rates[j] v)
    """

    poly: tuple[float, ...] = ()
    exp_amps: tuple[float, ...] = ()
    exp_rates: tuple[float, ...] = ()


Nonlinearity = AdEx | Quartic | CustomF
Rate = ExpRate | TabulatedRate


class CompiledModel(NamedTuple):
    """Flat numeric pack shared with the jitted core."""

    poly: np.ndarray
    eamps: np.ndarray
    erates: np.ndarray
    I: float
    v_r: float
    w_b: float
    lam_kind: int      # 0 exp-form, 1 tabulated
    lam_logamp: float  # lambda = exp(logamp + rate*v) for kind 0
    lam_rate: float
    lam_vs: np.ndarray
    lam_ls: np.ndarray
    lam_scale: float   # exp(logamp) precomputed
    shared_exp: int    # 1 when F's single exp term reuses lambda's exp(v)


@dataclass(frozen=True)
class ModelSpec:
    """All scalar symbols of the two-dimensional spiking model."""

    nonlinearity: Nonlinearity
    I: float = 0.0
    v_r: float = 1.0
    w_b: float = 1.0
    J: float = 0.0
    D: float = 0.0
    rate: Rate = field(default_factory=ExpRate)

    def __post_init__(self):
        if not (self.w_b > 0):
            raise ModelError("w_b must be > 0")
        if self.J < 0:
            raise ModelError("J must be >= 0 (excitatory coupling only)")
        if self.D < 0:
            raise ModelError("D must be >= 0")
        for name in ("I", "v_r", "w_b", "J", "D"):
            if not math.isfinite(getattr(self, name)):
                raise ModelError(f"{name} must be finite")

    # -- nonlinearity -----------------------------------------------------

    @property
    def adex_slope_ok(self) -> bool:
        """For the exponential family: whether a > 3 (separatrix condition)."""
        return isinstance(self.nonlinearity, AdEx) and self.nonlinearity.a > 3

    def _poly_exp(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        nl = self.nonlinearity
        if isinstance(nl, AdEx):
            return (np.array([nl.shift, -nl.a]),
                    np.array([1.0]), np.array([1.0]))
        if isinstance(nl, Quartic):
            return (np.array([0.0, 2.0 * nl.a, 0.0, 0.0, 1.0]),
                    np.zeros(0), np.zeros(0))
        poly = np.asarray(nl.poly, float) if nl.poly else np.zeros(1)
        amps = np.asarray(nl.exp_amps, float)
        rates = np.asarray(nl.exp_rates, float)
        if amps.size != rates.size:
            raise ModelError("exp_amps and exp_rates must match")
        return poly, amps, rates

    def F(self, v):
        poly, amps, rates = self._poly_exp()
        v = np.asarray(v, float)
        out = np.polynomial.polynomial.polyval(v, poly)
        for a_j, r_j in zip(amps, rates):
            out = out + a_j * np.exp(np.minimum(r_j * v, EXP_CAP))
        return out if out.ndim else float(out)

    def dF(self, v):
        poly, amps, rates = self._poly_exp()
        v = np.asarray(v, float)
        dpoly = np.polynomial.polynomial.polyder(poly) if poly.size > 1 else np.zeros(1)
        out = np.polynomial.polynomial.polyval(v, dpoly)
        for a_j, r_j in zip(amps, rates):
            out = out + a_j * r_j * np.exp(np.minimum(r_j * v, EXP_CAP))
        return out if out.ndim else float(out)

    def d2F(self, v):
        poly, amps, rates = self._poly_exp()
        v = np.asarray(v, float)
        d2poly = (np.polynomial.polynomial.polyder(poly, 2)
                  if poly.size > 2 else np.zeros(1))
        out = np.polynomial.polynomial.polyval(v, d2poly)
        for a_j, r_j in zip(amps, rates):
            out = out + a_j * r_j * r_j * np.exp(np.minimum(r_j * v, EXP_CAP))
        return out if out.ndim else float(out)

    def argmin_F(self) -> float:
        """Location of the minimum of F (unique under strict convexity)."""
        nl = self.nonlinearity
        if isinstance(nl, AdEx):
            if nl.a <= 0:
                raise ModelError("AdEx needs a > 0 for a minimum")
            return math.log(nl.a)
        if isinstance(nl, Quartic):
            return -float(np.cbrt(nl.a / 2.0))
        # custom: bracket the root of F' by expanding search
        lo, hi = -1.0, 1.0
        for _ in range(200):
            if self.dF(lo) < 0 and self.dF(hi) > 0:
                break
            if self.dF(lo) >= 0:
                lo *= 2.0
            if self.dF(hi) <= 0:
                hi *= 2.0
        else:
            raise ModelError("could not bracket the minimum of F")
        from scipy.optimize import brentq

        return float(brentq(lambda u: self.dF(u), lo, hi, xtol=1e-13))

    # -- rate --------------------------------------------------------------

    def lam(self, v):
        v = np.asarray(v, float)
        if isinstance(self.rate, ExpRate):
            out = np.exp(np.minimum(v + self.rate.K, EXP_CAP))
        else:
            vs = np.asarray(self.rate.v_nodes)
            ls = np.asarray(self.rate.lam_nodes)
            slope_hi = (ls[-1] - ls[-2]) / (vs[-1] - vs[-2])
            out = np.interp(v, vs, ls)
            out = np.where(v > vs[-1], ls[-1] + slope_hi * (v - vs[-1]), out)
        return out if out.ndim else float(out)

    def dlam(self, v):
        if isinstance(self.rate, ExpRate):
            return self.lam(v)
        vs = np.asarray(self.rate.v_nodes)
        ls = np.asarray(self.rate.lam_nodes)
        v = np.asarray(v, float)
        slopes = np.diff(ls) / np.diff(vs)
        idx = np.clip(np.searchsorted(vs, v) - 1, 0, slopes.size - 1)
        out = slopes[idx]
        out = np.where(v < vs[0], 0.0, out)
        return out if out.ndim else float(out)

    # -- compiled pack -----------------------------------------------------

    def compile(self) -> CompiledModel:
        poly, amps, rates = self._poly_exp()
        if isinstance(self.rate, ExpRate):
            kind, logamp, rate = 0, float(self.rate.K), 1.0
            vs = np.zeros(0)
            ls = np.zeros(0)
        else:
            kind, logamp, rate = 1, 0.0, 0.0
            vs = np.asarray(self.rate.v_nodes, float)
            ls = np.asarray(self.rate.lam_nodes, float)
        shared = int(kind == 0 and amps.size == 1
                     and float(rates[0]) == rate)
        return CompiledModel(
            np.ascontiguousarray(poly), np.ascontiguousarray(amps),
            np.ascontiguousarray(rates), float(self.I), float(self.v_r),
            float(self.w_b), kind, logamp, rate,
            np.ascontiguousarray(vs), np.ascontiguousarray(ls),
            math.exp(min(logamp, EXP_CAP)), shared,
        )

    def with_current(self, I: float) -> "ModelSpec":
        return replace(self, I=float(I))

    # -- JSON --------------------------------------------------------------

    def to_json(self) -> str:
        nl = self.nonlinearity
        if isinstance(nl, AdEx):
            doc = {"nonlinearity": "adex", "a": nl.a, "shift": nl.shift}
        elif isinstance(nl, Quartic):
            doc = {"nonlinearity": "quartic", "a": nl.a}
        else:
            raise ModelError("custom nonlinearities have no JSON form")
        if not isinstance(self.rate, ExpRate):
            raise ModelError("tabulated rates have no JSON form")
        doc.update(I=self.I, v_r=self.v_r, w_b=self.w_b, J=self.J,
                   D=self.D, rate="exp", K=self.rate.K)
        return json.dumps(doc)

    @staticmethod
    def from_json(text: str | dict) -> "ModelSpec":
        doc = json.loads(text) if isinstance(text, str) else dict(text)
        known = {"nonlinearity", "a", "shift", "I", "v_r", "w_b", "J", "D",
                 "rate", "K"}
        extra = set(doc) - known
        if extra:
            raise ModelError(f"unknown model keys: {sorted(extra)}")
        kind = doc.get("nonlinearity")
        if kind == "adex":
            nl: Nonlinearity = AdEx(a=float(doc["a"]),
                                    shift=float(doc.get("shift", 0.0)))
        elif kind == "quartic":
            nl = Quartic(a=float(doc["a"]))
        else:
            raise ModelError(f"unknown nonlinearity {kind!r}")
        if doc.get("rate", "exp") != "exp":
            raise ModelError(f"unknown rate {doc.get('rate')!r}")
        return ModelSpec(
            nonlinearity=nl,
            I=float(doc.get("I", 0.0)),
            v_r=float(doc["v_r"]),
            w_b=float(doc["w_b"]),
            J=float(doc.get("J", 0.0)),
            D=float(doc.get("D", 0.0)),
            rate=ExpRate(K=float(doc.get("K", 0.0))),
        )


def fig2_model(J: float = 0.0, D: float = 1.0) -> ModelSpec:
    """The canonical desk-scale configuration: F(v) = e^v - 5v - 2,
    v_r = 1, w_b = 2.5, lambda(v) = e^{v+2}."""
    return ModelSpec(nonlinearity=AdEx(a=5.0, shift=-2.0), I=0.0, v_r=1.0,
                     w_b=2.5, J=J, D=D, rate=ExpRate(K=2.0))


# -- field-level operations ---------------------------------------------------


def eval_field(model: ModelSpec, s: State, kappa: float = 0.0) -> tuple[float, float]:
    """Right-hand side (dv, dw) of the flow at state s under current kappa."""
    v, w = s
    return model.F(v) - w + model.I + kappa, v - w


def reset(model: ModelSpec, s: State) -> State:
    """Post-spike state (v_r, w + w_b)."""
    return State(model.v_r, s.w + model.w_b)


class RootBracketFailure(RuntimeError):
    pass


def nullclines(model: ModelSpec, w: float, kappa: float = 0.0,
               v_window: float = 1e6) -> dict:
    """Roots v_minus/v_plus of F(v) - w + I + kappa = 0 on either side of
    argmin F; absent (None) when w + ... lies below the minimum of F."""
    from scipy.optimize import brentq

    vm = model.argmin_F()
    level = w - model.I - kappa
    if level < model.F(vm):
        return {"v_minus": None, "v_plus": None}
    if level == model.F(vm):
        return {"v_minus": vm, "v_plus": vm}

    def g(v):
        return model.F(v) - level

    # left root
    lo = vm - 1.0
    while g(lo) < 0:
        lo = vm - 2.0 * (vm - lo)
        if vm - lo > v_window:
            raise RootBracketFailure("no left bracket within v_window")
    v_minus = float(brentq(g, lo, vm, xtol=1e-13))
    hi = vm + 1.0
    while g(hi) < 0:
        hi = vm + 2.0 * (hi - vm)
        if hi - vm > v_window:
            raise RootBracketFailure("no right bracket within v_window")
    v_plus = float(brentq(g, vm, hi, xtol=1e-13))
    return {"v_minus": v_minus, "v_plus": v_plus}


def equilibria(model: ModelSpec, kappa: float = 0.0) -> list[float]:
    """Solutions of F(v) + I + kappa = v (0, 1 or 2 by strict convexity).

    Equilibria of the flow sit on the diagonal w = v.
    """
    from scipy.optimize import brentq

    def g(v):
        return model.F(v) + model.I + kappa - v

    vm = model.argmin_F()
    # g is convex with g' < 0 left of some point; scan for sign structure
    roots: list[float] = []
    # minimum of g
    lo, hi = vm - 1.0, vm + 1.0
    dg = lambda v: model.dF(v) - 1.0
    for _ in range(300):
        if dg(lo) < 0 and dg(hi) > 0:
            break
        if dg(lo) >= 0:
            lo -= 2.0 * max(1.0, hi - lo)
        if dg(hi) <= 0:
            hi += 2.0 * max(1.0, hi - lo)
    else:
        return roots
    vstar = float(brentq(dg, lo, hi, xtol=1e-13))
    if g(vstar) > 0:
        return roots
    if g(vstar) == 0:
        return [vstar]
    span = 1.0
    while g(vstar - span) <= 0:
        span *= 2.0
        if span > 1e8:
            return roots
    roots.append(float(brentq(g, vstar - span, vstar, xtol=1e-13)))
    span = 1.0
    while g(vstar + span) <= 0:
        span *= 2.0
        if span > 1e8:
            return roots
    roots.append(float(brentq(g, vstar, vstar + span, xtol=1e-13)))
    return roots


def classify_current_regime(model: ModelSpec, tol: float = 1e-12) -> dict:
    """Number of flow equilibria at kappa=0 and whether the reset point
    (v_r, v_r) is itself an equilibrium (I outside the regularity set)."""
    eqs = equilibria(model)
    at_reset = abs(model.F(model.v_r) + model.I - model.v_r) <= tol
    return {"n_equilibria": len(eqs), "reset_is_equilibrium": bool(at_reset)}
