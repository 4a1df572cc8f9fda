import json
import math

import numpy as np
import pytest

from mkv_neuro.model import (AdEx, CustomF, ExpRate, ModelError, ModelSpec,
                             Quartic, State, TabulatedRate,
                             classify_current_regime, equilibria, eval_field,
                             fig2_model, nullclines, reset)


def test_field_fig2_origin():
    m = fig2_model()
    dv, dw = eval_field(m, State(0.0, 0.0), kappa=0.0)
    assert dv == -1.0  # F(0) = 1 - 0 - 2
    assert dw == 0.0


def test_field_w_nullcline_anywhere():
    m = fig2_model()
    for v in (-3.0, 0.4, 2.0):
        _, dw = eval_field(m, State(v, v))
        assert dw == 0.0


def test_field_quartic():
    m = ModelSpec(nonlinearity=Quartic(a=1.0), I=0.0, v_r=0.0, w_b=1.0)
    dv, dw = eval_field(m, State(1.0, 2.0))
    assert dv == pytest.approx(1.0)  # 1 + 2 - 2
    assert dw == pytest.approx(-1.0)


def test_reset_values():
    m = ModelSpec(nonlinearity=Quartic(a=1.0), v_r=1.0, w_b=2.5)
    s = reset(m, State(0.3, 4.0))
    assert s == State(1.0, 6.5)


def test_reset_additivity_and_abscissa():
    m = fig2_model()
    rng = np.random.default_rng(0)
    for _ in range(25):
        s = State(rng.normal(), rng.normal() * 5)
        twice = reset(m, reset(m, s))
        assert twice.w == pytest.approx(s.w + 2 * m.w_b)
        assert reset(m, s).v == m.v_r


def test_nullclines_exact_root():
    # F(0) = -1 exactly for the canonical model, so v_minus(w=-1) = 0
    m = fig2_model()
    roots = nullclines(m, w=-1.0, kappa=0.0)
    assert roots["v_minus"] == pytest.approx(0.0, abs=1e-10)
    assert roots["v_plus"] > math.log(5.0)


def test_nullcline_asymptote_adex():
    # left branch behaves like -w/a for large w
    m = fig2_model()
    for w in (1e3, 1e4, 1e5):
        vm = nullclines(m, w=w)["v_minus"]
        assert vm / w == pytest.approx(-1.0 / 5.0, rel=2e-2 * 1e3 / w + 1e-3)


def test_nullclines_absent_below_minimum():
    m = fig2_model()
    w_min = m.F(m.argmin_F()) + m.I
    roots = nullclines(m, w=w_min - 0.5)
    assert roots["v_minus"] is None and roots["v_plus"] is None


def test_regime_fig2_two_equilibria():
    m = fig2_model()
    out = classify_current_regime(m)
    assert out["n_equilibria"] == 2
    assert not out["reset_is_equilibrium"]


def test_regime_quartic_no_equilibrium():
    # v^4 + 2v + 10 - v has no real root: companion-matrix oracle
    m = ModelSpec(nonlinearity=Quartic(a=1.0), I=10.0, v_r=0.0, w_b=1.0)
    roots = np.roots([1.0, 0.0, 0.0, 1.0, 10.0])
    assert not np.any(np.abs(roots.imag) < 1e-9)  # oracle: none real
    assert classify_current_regime(m)["n_equilibria"] == 0


def test_reset_equilibrium_detection():
    # choose I so that F(v_r) + I = v_r exactly
    base = fig2_model()
    I = base.v_r - base.F(base.v_r)
    m = ModelSpec(nonlinearity=base.nonlinearity, I=I, v_r=base.v_r,
                  w_b=base.w_b, rate=base.rate)
    assert classify_current_regime(m)["reset_is_equilibrium"]


def test_equilibria_match_field_zeros():
    m = fig2_model()
    for v_eq in equilibria(m):
        dv, dw = eval_field(m, State(v_eq, v_eq))
        assert abs(dv) < 1e-9 and abs(dw) < 1e-12


def test_standing_assumptions_enforced():
    with pytest.raises(ModelError):
        ModelSpec(nonlinearity=Quartic(a=1.0), w_b=0.0)
    with pytest.raises(ModelError):
        ModelSpec(nonlinearity=Quartic(a=1.0), w_b=1.0, J=-0.5)
    with pytest.raises(ModelError):
        ModelSpec(nonlinearity=Quartic(a=1.0), w_b=1.0, D=-1.0)


def test_tabulated_rate_monotone_required():
    with pytest.raises(ModelError):
        TabulatedRate(v_nodes=(0.0, 1.0), lam_nodes=(2.0, 1.0))
    with pytest.raises(ModelError):
        TabulatedRate(v_nodes=(0.0, 1.0), lam_nodes=(0.0, 1.0))


def test_json_round_trip_exact_field_names():
    m = fig2_model(J=0.7, D=1.5)
    doc = json.loads(m.to_json())
    assert set(doc) == {"nonlinearity", "a", "shift", "I", "v_r", "w_b",
                        "J", "D", "rate", "K"}
    m2 = ModelSpec.from_json(json.dumps(doc))
    assert m2 == m


def test_json_rejects_unknown_keys():
    doc = json.loads(fig2_model().to_json())
    doc["extra"] = 1
    with pytest.raises(ModelError, match="extra"):
        ModelSpec.from_json(json.dumps(doc))


def test_compiled_pack_matches_python_eval():
    from mkv_neuro import _core

    models = [
        fig2_model(),
        ModelSpec(nonlinearity=Quartic(a=1.0), v_r=0.0, w_b=1.0,
                  rate=ExpRate(K=2.0)),
        ModelSpec(nonlinearity=CustomF(poly=(0.0, -4.0, 1.0)), v_r=0.0,
                  w_b=1.0,
                  rate=TabulatedRate(v_nodes=(-5.0, 0.0, 5.0),
                                     lam_nodes=(0.5, 1.0, 7.0))),
    ]
    vs = np.linspace(-8.0, 12.0, 41)
    for m in models:
        p = m.compile()
        for v in vs:
            assert _core.f_F(float(v), p) == pytest.approx(
                float(m.F(v)), rel=1e-13, abs=1e-13)
            assert _core.f_lam(float(v), p) == pytest.approx(
                float(m.lam(v)), rel=1e-13, abs=1e-300)
