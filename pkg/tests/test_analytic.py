import numpy as np
import pytest

from nvimaging import analytic as an
from nvimaging.spinsys import SpinSystem


def test_hh_dip_on_resonance_law():
    t = np.linspace(0, 3e-3, 9)
    s = an.hh_dip(2e6 + 3000, 3000, 500, 2e6, t)
    assert np.allclose(s, 1 - 0.5 * np.sin(np.pi * 500 * t) ** 2, atol=1e-14)


def test_hh_dip_far_detuned_is_flat():
    assert an.hh_dip(2e6 + 3e5, 3000, 500, 2e6, 1e-3) > 0.999


def test_hh_dip_small_argument_branch_continuous():
    a = an.hh_dip(2e6 + 3000, 3000, 500, 2e6, 1e-15)
    assert a == pytest.approx(1.0, abs=1e-20)


def test_cpmg_pseudo_signal_bounds_and_phi_independence():
    tau = np.linspace(0.2, 3, 200) / 5e5
    p0 = an.cpmg_pseudo_signal(tau, 4, 5e5, 1e4, 8e3, 0.0)
    p1 = an.cpmg_pseudo_signal(tau, 4, 5e5, 1e4, 8e3, 1.3)
    assert np.array_equal(p0, p1)
    assert np.all(p0 <= 1 + 1e-12) and np.all(p0 >= -1 - 1e-12)


def test_cpmg_params_validation():
    with pytest.raises(ValueError):
        an.CpmgParams(0.0, 1, 1e6, [1.0], [1.0])
    with pytest.raises(ValueError):
        an.CpmgParams(1e-6, 1, 1e6, [1.0, 2.0], [1.0])


def test_filter_closed_form_equals_sum():
    a = np.linspace(-5000, 5000, 301)
    g, mag = an.filter_value(30, 201.76e-6, a, 2e6)
    d = an.filter_direct(30, 201.76e-6, a, 2e6)
    assert np.max(np.abs(g - d)) < 1e-12
    assert np.max(np.abs(mag - np.abs(d))) < 1e-12


def test_filter_resonance_and_zero():
    F, tg = 30, 6e-3 / 30
    f0 = 404 / tg
    _, on = an.filter_value(F, tg, f0 - 2e6, 2e6)
    _, zero = an.filter_value(F, tg, f0 - 2e6 + an.first_filter_zero(F, tg), 2e6)
    assert on == pytest.approx(1.0, abs=1e-12)
    assert zero < 1e-9


def test_filter_params_memory_guard():
    with pytest.raises(ValueError):
        an.FilterParams(60, 201e-6, 720e-6)
    an.FilterParams(60, 201e-6, 720e-6, allow_long_memory=True)
    lw, bw = an.linewidth_bandwidth(an.FilterParams(30, 200e-6, 720e-6))
    assert lw == pytest.approx(1 / 6e-3) and bw == pytest.approx(5000)


def test_decoupling_scales():
    w = an.decoupling_scales("wahuha")
    assert w.lock == pytest.approx(0.5 / np.sqrt(3))
    assert w.rate == pytest.approx(0.7182335128, abs=1e-10)
    assert w.gradient == pytest.approx(1 / np.sqrt(3))
    assert an.decoupling_scales("ideal") == an.CouplingScales()
    assert an.decoupling_scales("none", 0.5).lock == 0.5
    with pytest.raises(ValueError):
        an.decoupling_scales("magic")


def test_wahuha_rate_identity():
    r3 = np.sqrt(3)
    assert np.sqrt(7 + 4 * r3) / (3 * r3) == pytest.approx(an.WAHUHA_RATE_SCALE, rel=1e-14)
    eff = an.wahuha_effective(3000.0, 400.0, 0.0)
    assert eff.resonance == pytest.approx(2e6 + 3000 / (2 * r3))
    assert np.hypot(eff.b_m, eff.c_m) == pytest.approx(eff.rate, rel=1e-12)


def test_cp_signal_product_of_independent_spins():
    s = SpinSystem.from_couplings([3000.0, 5000.0], [400.0, 300.0], omega_L=2e6)
    om = np.array([2e6 + 3000, 2e6 + 5000])
    x = an.spin_transfers(s, om, 720e-6)
    sig = an.cp_signal(s, om, 720e-6)
    assert np.allclose(sig, 0.5 * (1 + (1 - x[0]) * (1 - x[1])))
    one = SpinSystem.from_couplings([3000.0], [400.0], omega_L=2e6)
    assert an.cp_signal(one, 2e6 + 3000, 720e-6) == pytest.approx(an.hh_dip(2e6 + 3000, 3000, 400, 2e6, 720e-6))


def test_hopping_matrix_pair_and_stochastic():
    d = 150.0
    m = an.hopping_matrix([[0, d], [d, 0]], 1 / (4 * d))
    assert m[0, 1] == pytest.approx(np.sin(np.pi * d / (4 * d)) ** 2)
    rng = np.random.default_rng(2)
    big = rng.normal(scale=200, size=(5, 5))
    big = big + big.T
    np.fill_diagonal(big, 0)
    m = an.hopping_matrix(big, 1e-3)
    assert np.allclose(m.sum(0), 1) and np.allclose(m.sum(1), 1)


def test_twod_signal_pair_matches_peaks():
    bi, bj, d, t = 350.0, 450.0, 150.0, 720e-6
    s = SpinSystem.from_couplings([3000.0, 9000.0], [bi, bj], omega_L=2e6, d_matrix=[[0, d], [d, 0]])
    om = np.array([2e6 + 3000, 2e6 + 9000])
    for td in (0.0, 1 / (8 * d), 1 / (3 * d)):
        v = an.twod_signal(s, om, 0.0, om, 0.0, t, 1, td)
        sii, sij = an.twod_peaks(an.TwoDPeakParams(bi, bj, d, t, td))
        # off-resonant leakage from the detuned partner is a few 1e-3
        assert v[0, 0] == pytest.approx(sii, abs=5e-3)
        assert v[0, 1] == pytest.approx(sij, abs=5e-3)


def test_twod_signal_bounded():
    rng = np.random.default_rng(5)
    n = 6
    d = rng.normal(scale=300, size=(n, n))
    d = d + d.T
    np.fill_diagonal(d, 0)
    s = SpinSystem.from_couplings(np.full(n, 3000.0), rng.uniform(400, 900, n), omega_L=2e6, d_matrix=d)
    v = an.twod_signal(s, 2e6 + 3000, 0.0, 2e6 + 3000, 0.0, 720e-6, 1, 5e-4)
    assert 0.5 <= v.min() and v.max() <= 1.0
