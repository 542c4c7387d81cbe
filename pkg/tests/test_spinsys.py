import numpy as np
import pytest

from nvimaging import constants
from nvimaging.spinsys import (
    GeometryError, NuclearSpin, NvConfig, SpinSystem, d_matrix_from_positions, dipolar_vector, field_map,
    field_map_csv, gradient_shift, homonuclear_coupling, hyperfine_from_position, slab_grid,
)

# Frozen from a standalone evaluation of the point-dipole formulas with CODATA
# constants (mu0, hbar) and the tabulated gyromagnetic ratios.
PROTON_112_A = 5379.651690690367
PROTON_112_B = 7607.976381817669
K_13C_HZ_NM3 = 19884.993860127553
D_CC_154_PERP = 2080.3817613602014


def test_proton_at_112_oracle():
    hf = hyperfine_from_position(NuclearSpin("1H", (1.0, 1.0, 2.0)))
    assert hf.a_par == pytest.approx(PROTON_112_A, rel=1e-12)
    assert hf.b_perp == pytest.approx(PROTON_112_B, rel=1e-12)
    assert hf.phi == pytest.approx(np.pi / 4, abs=1e-15)


def test_electron_nuclear_prefactor_13c():
    k = constants.DEFAULT_CONSTANTS.electron_nuclear_prefactor("13C") * 1e27
    assert k == pytest.approx(K_13C_HZ_NM3, rel=1e-12)
    assert k == pytest.approx(19.9e3, rel=2e-3)


def test_on_axis_spin_has_no_transverse_coupling():
    hf = hyperfine_from_position(NuclearSpin("13C", (0.0, 0.0, 2.0)))
    assert hf.b_perp == 0.0 and hf.phi == 0.0
    assert hf.a_par == pytest.approx(2 * K_13C_HZ_NM3 / 8, rel=1e-12)


def test_magic_angle_zero_a():
    z = 1.0
    rho = np.sqrt(2.0) * z
    hf = hyperfine_from_position(NuclearSpin("13C", (rho, 0.0, z)))
    assert abs(hf.a_par) < 1e-9


def test_carbon_pair_perpendicular_oracle():
    i = NuclearSpin("13C", (0.0, 0.0, 2.0))
    j = NuclearSpin("13C", (0.154, 0.0, 2.0))
    assert homonuclear_coupling(i, j) == pytest.approx(D_CC_154_PERP, rel=1e-12)
    k = NuclearSpin("13C", (0.0, 0.0, 2.154))
    assert homonuclear_coupling(i, k) == pytest.approx(-2 * D_CC_154_PERP, rel=1e-12)


def test_d_matrix_matches_pairwise():
    rng = np.random.default_rng(0)
    pos = rng.normal(size=(5, 3)) + np.array([0, 0, 3.0])
    spins = [NuclearSpin("13C", tuple(p)) for p in pos]
    d = d_matrix_from_positions(pos, ["13C"] * 5)
    for a in range(5):
        for b in range(5):
            if a != b:
                assert d[a, b] == pytest.approx(homonuclear_coupling(spins[a], spins[b]), rel=1e-12)
    assert np.array_equal(d, d.T)


def test_coincident_spins_rejected():
    with pytest.raises(GeometryError):
        d_matrix_from_positions([[0, 0, 2], [0, 0, 2]], ["13C", "13C"])
    with pytest.raises(GeometryError):
        NuclearSpin("13C", (0.0, 0.0, 0.0))
    with pytest.raises(GeometryError):
        dipolar_vector((0.0, 0.0, 0.0))


def test_tilted_nv_frame_roundtrip():
    axis = tuple(np.array([1.0, 1.0, 1.0]) / np.sqrt(3))
    nv = NvConfig(axis=axis)
    p = np.array([[0.3, -0.2, 2.1]])
    assert np.allclose(nv.to_lab_frame(nv.to_nv_frame(p)), p)
    assert np.allclose(nv.to_nv_frame(np.array(axis)), [0, 0, 1])
    assert np.allclose(nv.surface_normal_nv, nv.to_nv_frame(np.array([0, 0, 1.0])))


def test_for_larmor():
    nv = NvConfig.for_larmor(2e6)
    s = SpinSystem.from_spins(nv, [NuclearSpin("13C", (0.1, 0.2, 2.0))])
    assert s.omega_L == pytest.approx(2e6, rel=1e-12)
    assert gradient_shift(0, s) == pytest.approx(2e6 + s.a[0])


def test_from_couplings_and_subset():
    s = SpinSystem.from_couplings([1000, 2000, 3000], [100, 200, 300], omega_L=1e6,
                                  d_matrix=[[0, 5, 6], [5, 0, 7], [6, 7, 0]])
    sub = s.subset([2, 0])
    assert list(sub.a) == [3000, 1000]
    assert sub.d_matrix[0, 1] == 6
    with pytest.raises(ValueError):
        SpinSystem.from_couplings([1, 2], [1, 2], d_matrix=[[0, 1], [2, 0]])


def test_empty_system():
    s = SpinSystem.from_spins(NvConfig(), [])
    assert s.n_spins == 0 and s.d_matrix.shape == (0, 0)


def test_field_map_azimuthal_degeneracy():
    nv = NvConfig()
    ring = [(np.cos(t) * 1.2, np.sin(t) * 1.2, 2.0) for t in np.linspace(0, 2 * np.pi, 9)]
    vals = field_map(nv, ring)
    assert np.ptp(vals) < 1e-9 * abs(vals[0])
    grid = slab_grid((-1, 1), (-1, 1), (2, 3), (3, 3, 2))
    assert grid.shape == (18, 3)
    text = field_map_csv(grid, field_map(nv, grid))
    assert text.splitlines()[0] == "x_nm,y_nm,z_nm,shift_hz" and len(text.splitlines()) == 19


def test_unknown_species():
    with pytest.raises(KeyError):
        dipolar_vector((0, 0, 2), species="99Xx")
