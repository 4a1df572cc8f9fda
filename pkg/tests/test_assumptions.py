import math

import numpy as np
import pytest

from mkv_neuro.assumptions import InvalidWindow, check_assumptions
from mkv_neuro.model import (AdEx, CustomF, ExpRate, ModelSpec, Quartic,
                             TabulatedRate, fig2_model)


def test_fig2_all_pass():
    # a = 5 with K = 2 >= log 2: the canonical configuration
    rep = check_assumptions(fig2_model())
    assert rep.all_pass, rep.verdicts


def test_adex_k_at_threshold_passes():
    m = ModelSpec(nonlinearity=AdEx(a=5.0, shift=0.0), v_r=1.0, w_b=1.0,
                  rate=ExpRate(K=math.log(2.0)))
    rep = check_assumptions(m)
    assert rep.all_pass, rep.verdicts


def test_izhikevich_fails_growth():
    # quadratic F = v(v - a): steep left slope holds but the growth
    # exponent is only 2
    m = ModelSpec(nonlinearity=CustomF(poly=(0.0, -1.0, 1.0)), v_r=0.0,
                  w_b=1.0, rate=ExpRate(K=2.0))
    rep = check_assumptions(m)
    assert rep.verdicts["A1"] == "fail"
    assert rep.evidence["A1"]["left_slope_limit"] == -math.inf
    assert rep.evidence["A1"]["growth"]["reason"].startswith("growth")


def test_quartic_passes_with_finite_exponent():
    # symbolic-limit oracle: v^4 / v^{2+eps} -> infinity for eps <= 2
    m = ModelSpec(nonlinearity=Quartic(a=1.0), v_r=0.0, w_b=1.0,
                  rate=ExpRate(K=2.0))
    rep = check_assumptions(m)
    assert rep.verdicts["A1"] == "pass"
    assert rep.evidence["A1"]["growth"]["epsilon_F"] <= 2.0


def test_shallow_adex_slope_fails():
    m = ModelSpec(nonlinearity=AdEx(a=2.0, shift=0.0), v_r=0.0, w_b=1.0,
                  rate=ExpRate(K=2.0))
    rep = check_assumptions(m)
    assert rep.verdicts["A1"] == "fail"
    assert rep.evidence["A1"]["left_slope_limit"] == -2.0


def test_slowly_growing_rate_fails_divergence():
    # bounded tabulated rate against quartic growth: int lambda / F < inf
    m = ModelSpec(
        nonlinearity=Quartic(a=1.0), v_r=0.0, w_b=1.0,
        rate=TabulatedRate(v_nodes=(-10.0, 0.0, 10.0),
                           lam_nodes=(1.0, 2.0, 2.0)))
    rep = check_assumptions(m, v_window=(-30.0, 2000.0), grid_n=20000)
    assert rep.verdicts["A2"] == "fail"


def test_a6_reports_constant(fig2):
    rep = check_assumptions(fig2)
    c0 = rep.evidence["A6"]["alpha=0.0"]["C_lambda"]
    # direct oracle on a fine grid: sup of lambda' (F + 0) - lambda^2
    vs = np.linspace(-30.0, 60.0, 30001)
    expr = fig2.lam(vs) * (fig2.F(vs)) - fig2.lam(vs) ** 2
    assert c0 == pytest.approx(float(expr.max()), rel=1e-3)


def test_invalid_window_and_grid():
    with pytest.raises(InvalidWindow):
        check_assumptions(fig2_model(), v_window=(1.0, 1.0))
    with pytest.raises(ValueError):
        check_assumptions(fig2_model(), grid_n=10)


def test_report_document_shape():
    rep = check_assumptions(fig2_model())
    doc = rep.to_doc()
    assert set(doc) == {"verdicts", "evidence"}
    assert set(doc["verdicts"]) == {"A1", "A2", "A3", "A4", "A5", "A6"}
