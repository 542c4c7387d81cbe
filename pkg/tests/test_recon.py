import json

import numpy as np
import pytest

from nvimaging import analytic as an
from nvimaging import protocol as pr
from nvimaging import recon
from nvimaging.spinsys import NuclearSpin, NvConfig, SpinSystem

NV = NvConfig.for_larmor(2e6, depth=1.75)
POS = [(0.3, 0.1, 2.0), (0.1, 0.3, 2.15), (0.35, -0.15, 2.25)]


def three_spin():
    return SpinSystem.from_spins(NV, [NuclearSpin("13C", p, f"c{k}") for k, p in enumerate(POS)])


def exact_estimate(s):
    d = s.d_matrix.copy()
    return recon.CouplingEstimate(a=s.a, b=s.b, sigma_a=recon.SIGMA_A, sigma_b=recon.SIGMA_B, d=np.abs(d),
                                  labels=list(s.labels))


def relative_phases(p):
    ph = np.arctan2(p[:, 1], p[:, 0])
    return recon._wrap(ph - ph[0])


def test_constraint_count():
    assert recon.constraint_count(1) == 2
    assert recon.constraint_count(3) == 9
    assert recon.constraint_count(12) == 24 + 66


def test_sigma_d_default():
    assert recon.sigma_d_default(np.array([0.0]))[0] == pytest.approx(50.0)
    assert recon.sigma_d_default(np.array([200.0]))[0] == pytest.approx(np.hypot(100, 50))


def test_invert_depth_inverse():
    t = 720e-6
    for b in (100.0, 300.0, 600.0):
        depth = 0.5 * np.sin(np.pi * b * t) ** 2
        assert recon.invert_depth(depth, t) == pytest.approx(b, rel=1e-10)
    with pytest.raises(recon.ReconstructionError):
        recon.invert_depth(0.7, t)


@pytest.mark.parametrize("pos", POS + [(0.0, 0.4, 1.9), (1.0, 0.0, 2.2)])
def test_invert_position_recovers_radial(pos):
    s = SpinSystem.from_spins(NV, [NuclearSpin("13C", pos)])
    roots = recon.invert_position(s.a[0], s.b[0], NV)
    rz, rp = pos[2], np.hypot(pos[0], pos[1])
    assert any(abs(r.r_z - rz) < 1e-9 and abs(r.r_perp - rp) < 1e-9 and r.admissible for r in roots)
    for r in roots:
        a, b = recon.couplings_from_radial(r.r_z, r.r_perp)
        assert a == pytest.approx(s.a[0], abs=1e-6 * abs(s.b[0]) + 1e-6)
        assert b == pytest.approx(s.b[0], rel=1e-6)
    # every root comes with its mirror through the NV plane
    zs = sorted(r.r_z for r in roots)
    assert np.allclose(zs, sorted(-z for z in zs))


def test_invert_position_rejects_zero():
    with pytest.raises(recon.ReconstructionError):
        recon.invert_position(0.0, 0.0)
    with pytest.raises(ValueError):
        recon.invert_position(1000.0, -1.0)


def test_peakset_validation():
    with pytest.raises(ValueError):
        recon.PeakSet([recon.Peak(2.0, 0.1, 1.0), recon.Peak(1.0, 0.1, 1.0)])
    with pytest.raises(ValueError):
        recon.PeakSet([recon.Peak(1.0, 1.5, 1.0)])


def test_pick_peaks_finds_isolated_dips():
    s = SpinSystem.from_couplings([3000.0, 4500.0], [400.0, 300.0], omega_L=2e6)
    base = pr.fig3_protocol("ideal")
    spec = pr.make_1d_scan(s, base, pr.SweepAxis("A", tuple(np.linspace(2000, 5500, 701)), 404))
    pk = recon.pick_peaks(spec)
    assert len(pk) == 2
    assert np.allclose(pk.centers, [3000, 4500], atol=1.0)
    t = base.contact_time
    assert np.allclose(pk.depths, 0.5 * np.sin(np.pi * np.array([400, 300]) * t) ** 2, atol=2e-3)


def test_reconstruct_from_exact_couplings():
    s = three_spin()
    r = recon.reconstruct_from_couplings(exact_estimate(s), NV)
    # position up to a global rotation about the NV axis and mirror
    tp = s.positions
    for P in (r.positions, r.mirror_positions):
        assert np.allclose(P[:, 2], tp[:, 2], atol=1e-8)
        assert np.allclose(np.hypot(P[:, 0], P[:, 1]), np.hypot(tp[:, 0], tp[:, 1]), atol=1e-8)
    err = min(np.abs(recon._wrap(relative_phases(P) - relative_phases(tp))).max()
              for P in (r.positions, r.mirror_positions))
    assert err < 1e-6
    assert all(r.phases_determined)
    d = json.loads(r.to_json())
    assert d["constraints"] == {"available": 9, "maximum": 9, "unknowns": 8}
    assert "c0" in r.summary()


def test_without_d_phases_undetermined():
    s = three_spin()
    est = exact_estimate(s)
    est = recon.CouplingEstimate(a=est.a, b=est.b, sigma_a=300, sigma_b=300)
    r = recon.reconstruct_from_couplings(est, NV)
    assert not any(r.phases_determined)
    assert all(v is None for v in r.volumes)
    assert any("phase" in w or "D" in w for w in r.warnings)


def test_solve_phases_recovers_relative_azimuths():
    s = three_spin()
    p = s.positions
    radial = [(z, rp) for z, rp in zip(p[:, 2], np.hypot(p[:, 0], p[:, 1]))]
    sols = recon.solve_phases(np.abs(s.d_matrix), radial)
    assert len(sols) == 1
    sol = sols[0]
    truth = relative_phases(p)[sol.members]
    err = min(np.abs(recon._wrap(sol.phases - truth)).max(), np.abs(recon._wrap(sol.mirror - truth)).max())
    assert err < 1e-6


def test_uncertainty_psd_and_volume_grows_with_distance():
    vols = []
    for z in (1.9, 2.2, 2.6, 3.0):
        pos = np.array([[0.2, 0.0, z], [0.0, 0.25, z + 0.15], [-0.2, -0.1, z + 0.1]])
        u = recon.estimate_uncertainty(pos)
        assert all(recon.covariance_is_psd(c) for c in u.covariance)
        vols.append(u.volumes[0])
    assert all(v is not None for v in vols)
    assert np.all(np.diff(vols) > 0)


def test_isolated_spin_volume_undetermined():
    u = recon.estimate_uncertainty(np.array([[0.3, 0.0, 2.0]]))
    assert u.volumes == [None]
    assert len(u.unconstrained[0]) == 1


def test_extract_pair_couplings_from_analytic_2d():
    bi, bj, d = 350.0, 450.0, 150.0
    s = SpinSystem.from_couplings([3000.0, 4500.0], [bi, bj], [0.3, 1.9], omega_L=2e6, d_matrix=[[0, d], [d, 0]])
    base = pr.fig3_protocol("ideal")
    ax = pr.SweepAxis("A", tuple(np.linspace(2500, 5000, 251)), 404)
    s1 = pr.make_1d_scan(s, base, ax)
    s2 = pr.make_2d_scan(s, base, ax, 1 / (6 * d))
    est = recon.refine_couplings(s1, recon.extract_couplings(recon.pick_peaks(s1), base))
    est = recon.extract_pair_couplings(s2, est)
    assert est.d[0, 1] == pytest.approx(d, rel=1e-3)
    assert np.allclose(est.b, [bi, bj], rtol=1e-3)


def test_reconstruct_requires_peaks():
    s = SpinSystem.from_couplings([3000.0], [1.0], omega_L=2e6)
    spec = pr.make_1d_scan(s, pr.fig3_protocol("ideal"), pr.SweepAxis("A", (2000.0, 2500.0, 4000.0), 404))
    with pytest.raises(recon.ReconstructionError):
        recon.reconstruct(spec)
