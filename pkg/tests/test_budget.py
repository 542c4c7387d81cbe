import json

import numpy as np
import pytest

from nvimaging import budget as bd


def test_defaults():
    assert bd.DEFAULT_T_A == pytest.approx(4.52e-6)
    p = bd.BudgetParams(t_g=200e-6)
    assert p.gradient_time == pytest.approx(6e-3)
    assert bd.BudgetParams(T_g=1e-3, t_g=200e-6).gradient_time == 1e-3


def test_validation():
    for kw in ({"M": -1}, {"C": 1.5}, {"b": 0}, {"T_rho_kind": "other"}, {"T_g": -1.0}):
        with pytest.raises(ValueError):
            bd.BudgetParams(**kw)


def test_contrast_law_and_plateau():
    assert bd.dip_contrast(250, 1e-3) == pytest.approx(0.5 * np.sin(np.pi * 0.25) ** 2)
    assert bd.dip_contrast(250, 2e-3) == pytest.approx(0.5)
    assert bd.dip_contrast(250, 3e-3) == 0.5


def test_snr_and_inverse():
    p = bd.BudgetParams(M=800)
    m = bd.repetitions_for_snr(bd.snr(p), p)
    assert m == pytest.approx(800)
    assert bd.repetitions_for_snr(3, bd.BudgetParams(C=0.0)) == float("inf")


def test_time_identity():
    p = bd.BudgetParams(T_g=6e-3, t_d=0.3)
    assert bd.time_2d(p) == p.b ** 2 * bd.time_shot(p) + p.b * p.t_d


def test_bins_and_report():
    p = bd.BudgetParams(T_g=6e-3, W=1000.0)
    assert bd.bins_for_bandwidth(1000.0, p) == 6
    rep = json.loads(bd.report_json(p))
    assert rep["params"]["b"] == 6
    assert rep["T_rho_used"] == {"value_s": 2e-3, "kind": "coherence"}
    assert rep["T_1D_min"] == pytest.approx(rep["T_1D_s"] / 60)
    assert bd.bins_for_bandwidth(1000.0, bd.BudgetParams()) == 1
