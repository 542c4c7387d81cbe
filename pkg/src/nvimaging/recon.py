"""Spectrum inversion: peak picking, coupling extraction, position and phase
reconstruction, and regression-based volume uncertainty.

All positions are in nm in the NV frame (NV axis = z); couplings are in Hz.
"""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import least_squares

from . import analytic
from .constants import DEFAULT_CONSTANTS, NM, PhysicalConstants
from .protocol import DIP_THRESHOLD, PulseProtocol, Spectrum
from .spinsys import NvConfig, SpinSystem, _dipolar_many, d_matrix_from_positions

SIGMA_A = 300.0
SIGMA_B = 300.0
SIGMA_D_FLOOR = 50.0
SIGMA_D_FRACTION = 0.5
FD_STEP_NM = 1e-4
DEPTH_TOL = 1e-3
COMPOSITE_FACTOR = 1.5


class ReconstructionError(ValueError):
    """Inversion failed; ``residual`` carries the best misfit when known."""

    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)


def sigma_d_default(d) -> np.ndarray:
    """Default homonuclear error model ``sqrt((0.5 D)^2 + (50 Hz)^2)``."""
    d = np.asarray(d, dtype=float)
    return np.sqrt((SIGMA_D_FRACTION * d) ** 2 + SIGMA_D_FLOOR ** 2)


def constraint_count(n: int) -> int:
    """Largest number of coupling equations for ``n`` spins: 2N + N(N-1)/2."""
    return 2 * n + n * (n - 1) // 2


# -- peaks -------------------------------------------------------------------------

@dataclass(frozen=True)
class Peak:
    center: float  # Hz, coupling A
    depth: float
    width: float  # Hz, full width at half depth (nan if a crossing is missing)
    composite: bool = False


@dataclass(frozen=True)
class PeakSet:
    peaks: tuple
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        c = [p.center for p in self.peaks]
        if np.any(np.diff(c) <= 0):
            raise ValueError("peak centres must be strictly increasing")
        if any(not 0 < p.depth <= 1 for p in self.peaks):
            raise ValueError("peak depths must lie in (0, 1]")

    def __len__(self):
        return len(self.peaks)

    @property
    def centers(self) -> np.ndarray:
        return np.array([p.center for p in self.peaks])

    @property
    def depths(self) -> np.ndarray:
        return np.array([p.depth for p in self.peaks])


def spectrum_protocol(spectrum: Spectrum) -> Optional[PulseProtocol]:
    d = spectrum.metadata.get("protocol")
    return PulseProtocol.from_dict(d) if d else None


def spectrum_larmor(spectrum: Spectrum, default: float = 2e6) -> float:
    lar = spectrum.metadata.get("system", {}).get("larmor_hz") or []
    return float(lar[0]) if lar else default


def coupling_axis(spectrum: Spectrum, k: int = 0, protocol: Optional[PulseProtocol] = None,
                  omega_L: Optional[float] = None) -> np.ndarray:
    """Axis ``k`` expressed as the on-resonance coupling A (Hz).

    A co-swept ``A`` axis is returned as is; an ``Omega`` axis is mapped through
    ``A = (Omega - omega_L)/lock`` with the lock scale of the protocol, which is
    ``A = 2(Omega - omega_L)`` for a half lock shift.
    """
    ax = spectrum.axes[k]
    v = np.asarray(ax["values"], dtype=float)
    if ax["name"] == "A":
        return v
    if ax["name"] == "Omega":
        protocol = protocol or spectrum_protocol(spectrum)
        lock = protocol.scales.lock if protocol is not None else 1.0
        wl = spectrum_larmor(spectrum) if omega_L is None else omega_L
        return (v - wl) / lock
    raise ValueError(f"axis {ax['name']!r} cannot be mapped to a coupling")


def _half_crossing(x, v, i, level, step):
    j = i
    while 0 <= j + step < len(v) and v[j + step] < level:
        j += step
    k = j + step
    if not 0 <= k < len(v):
        return np.nan
    f = (level - v[j]) / (v[k] - v[j])
    return x[j] + f * (x[k] - x[j])


def pick_peaks(spectrum: Spectrum, threshold: float = DIP_THRESHOLD, baseline: float = 1.0,
               protocol: Optional[PulseProtocol] = None, omega_L: Optional[float] = None,
               resolution: Optional[float] = None) -> PeakSet:
    """Dips of a 1D forward spectrum.

    Local minima below ``threshold`` are refined by a 3-point parabola. The
    depth is measured from ``baseline`` and the width is the full width at half
    depth. ``resolution`` (Hz) is the expected single-line width; a wider
    peak is flagged composite. It defaults to the filter width 1/(F t_g).
    """
    if spectrum.dims != 1:
        raise ValueError("pick_peaks needs a 1D spectrum")
    v = np.asarray(spectrum.values, dtype=float)
    if v.size == 0:
        raise ValueError("empty spectrum")
    protocol = protocol or spectrum_protocol(spectrum)
    x = coupling_axis(spectrum, 0, protocol, omega_L)
    if x.size > 1 and x[0] > x[-1]:
        x, v = x[::-1], v[::-1]
    if resolution is None and protocol is not None and protocol.filter is not None and protocol.t_g > 0:
        resolution = analytic.first_filter_zero(protocol.F, protocol.t_g) / protocol.scales.gradient
    mid = v[1:-1]
    idx = np.flatnonzero((mid < threshold) & (mid < v[:-2]) & (mid <= v[2:])) + 1
    peaks = []
    for i in idx:
        y0, y1, y2 = v[i - 1], v[i], v[i + 1]
        den = y0 - 2 * y1 + y2
        off = 0.5 * (y0 - y2) / den if den > 0 else 0.0
        h = 0.5 * (x[i + 1] - x[i - 1])
        center = x[i] + off * h
        vmin = y1 - 0.25 * (y0 - y2) * off
        depth = float(np.clip(baseline - vmin, np.finfo(float).tiny, 1.0))
        half = baseline - depth / 2
        lo = _half_crossing(x, v, i, half, -1)
        hi = _half_crossing(x, v, i, half, +1)
        width = float(hi - lo)
        composite = bool(resolution is not None and np.isfinite(width) and width > COMPOSITE_FACTOR * resolution)
        peaks.append(Peak(float(center), depth, width, composite))
    return PeakSet(tuple(peaks), source={"fingerprint": spectrum.metadata.get("system", {}),
                                         "axis": spectrum.axes[0]["name"]})


# -- couplings -----------------------------------------------------------------------

@dataclass
class CouplingEstimate:
    """Per-spin (A, B_perp) and the pairwise |D| matrix (nan = missing)."""

    a: np.ndarray
    b: np.ndarray
    sigma_a: np.ndarray
    sigma_b: np.ndarray
    d: np.ndarray = None
    sigma_d: np.ndarray = None
    labels: list = None
    composite: list = None
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.a = np.atleast_1d(np.asarray(self.a, dtype=float))
        self.b = np.atleast_1d(np.asarray(self.b, dtype=float))
        n = len(self.a)
        self.sigma_a = np.broadcast_to(np.asarray(self.sigma_a, dtype=float), (n,)).copy()
        self.sigma_b = np.broadcast_to(np.asarray(self.sigma_b, dtype=float), (n,)).copy()
        if np.any(self.sigma_a < 0) or np.any(self.sigma_b < 0):
            raise ValueError("sigmas must be non-negative")
        if self.d is None:
            self.d = np.full((n, n), np.nan)
        self.d = np.asarray(self.d, dtype=float)
        np.fill_diagonal(self.d, np.nan)
        if not np.allclose(np.nan_to_num(self.d, nan=0.0), np.nan_to_num(self.d.T, nan=0.0)):
            raise ValueError("D estimates must be symmetric")
        if self.sigma_d is None:
            self.sigma_d = sigma_d_default(self.d)
        self.labels = self.labels or [f"p{k}" for k in range(n)]
        self.composite = self.composite or [False] * n

    @property
    def n(self) -> int:
        return len(self.a)


def invert_depth(depth: float, t: float, rate: float = 1.0, tol: float = 1e-2) -> float:
    """Smallest B_perp with ``depth = sin^2(pi rate B t)/2``."""
    if depth < 0:
        raise ValueError("negative depth")
    if depth > 0.5 + tol:
        raise ReconstructionError(f"dip depth {depth:.4g} exceeds 1/2; no physical B_perp")
    return float(np.arcsin(np.sqrt(min(2 * depth, 1.0))) / (np.pi * t) / rate)


def extract_couplings(peaks: PeakSet, protocol: PulseProtocol, sigma_a: float = SIGMA_A,
                      sigma_b: float = SIGMA_B) -> CouplingEstimate:
    """(A, B_perp) per peak; the decoupling rate scale is divided out of B."""
    t = protocol.contact_time
    rate = protocol.scales.rate
    a = peaks.centers
    b = np.array([invert_depth(p.depth, t, rate) for p in peaks.peaks])
    return CouplingEstimate(a=a, b=b, sigma_a=sigma_a, sigma_b=sigma_b,
                            composite=[p.composite for p in peaks.peaks])


def refine_couplings(spectrum: Spectrum, est: CouplingEstimate, protocol: Optional[PulseProtocol] = None,
                     omega_L: Optional[float] = None) -> CouplingEstimate:
    """Polish (A, B_perp) of every peak by fitting the analytic 1D model to
    the whole spectrum. Starts from the peak-picked values."""
    protocol = protocol or spectrum_protocol(spectrum)
    wl = spectrum_larmor(spectrum) if omega_L is None else omega_L
    ax = spectrum.axes[0]
    om = np.asarray(ax["omega_hz"], dtype=float)
    tg = np.asarray(ax["t_g_s"], dtype=float)
    v = np.asarray(spectrum.values, dtype=float)
    n = est.n
    if n == 0:
        return est

    def resid(x):
        sys = SpinSystem.from_couplings(x[:n], np.abs(x[n:]), omega_L=wl)
        return analytic.cp_signal(sys, om, protocol.contact_time, protocol.F, tg, protocol.scales) - v

    x0 = np.concatenate([est.a, est.b])
    r = least_squares(resid, x0, x_scale=np.maximum(np.abs(x0), 1.0), xtol=1e-15, ftol=1e-15, gtol=1e-15)
    spacing = np.min(np.diff(np.sort(est.a))) if n > 1 else np.inf
    if np.max(np.abs(r.x[:n] - est.a)) > 0.5 * max(spacing, 1.0):
        est.warnings.append("model refinement moved a peak by more than half the peak spacing; kept picked values")
        return est
    return CouplingEstimate(a=r.x[:n], b=np.abs(r.x[n:]), sigma_a=est.sigma_a, sigma_b=est.sigma_b, d=est.d,
                            sigma_d=est.sigma_d, labels=est.labels, composite=est.composite,
                            warnings=list(est.warnings))


def _transfer_table(est: CouplingEstimate, protocol: PulseProtocol, omega, t_g, omega_L):
    sys = SpinSystem.from_couplings(est.a, est.b, omega_L=omega_L)
    return analytic.spin_transfers(sys, omega, protocol.contact_time, protocol.F, t_g, protocol.scales)


def _fit_cross_peaks(s_meas, mask, d0, model):
    """Signed D fit of the sampled 2D signal; ``model(d)`` predicts it."""
    n = len(d0)
    iu = [(i, j) for i in range(n) for j in range(i + 1, n) if mask[i, j]]
    if not iu:
        return d0

    def unpack(x):
        d = np.zeros((n, n))
        for (i, j), v in zip(iu, x):
            d[i, j] = d[j, i] = v
        return d

    def resid(x):
        return (model(unpack(x)) - s_meas).ravel()

    x0 = np.array([abs(d0[i, j]) for i, j in iu])
    best = None
    # The hopping matrix is invariant under a global sign flip and under
    # per-spin gauge flips; trying all sign patterns is cheap for small n.
    patterns = itertools.product((1.0, -1.0), repeat=len(iu)) if len(iu) <= 10 else [np.ones(len(iu))]
    for sgn in patterns:
        r = least_squares(resid, x0 * np.asarray(sgn), x_scale=np.maximum(x0, 1.0), xtol=1e-15, ftol=1e-15,
                          gtol=1e-15, max_nfev=50 * len(iu))
        if best is None or r.cost < best.cost - 1e-18:
            best = r
    return np.abs(unpack(best.x))


def extract_pair_couplings(spectrum2d: Spectrum, couplings: CouplingEstimate, t_d: Optional[float] = None,
                           protocol: Optional[PulseProtocol] = None, noise_floor: float = 1e-6,
                           refine: bool = True) -> CouplingEstimate:
    """|D_ij| from the cross peaks of a 2D correlation spectrum.

    Each spin is assigned the grid row and column nearest its A. The
    transfer fractions predicted from the fitted (A, B) unmix the peaks into
    diffusion transfer probabilities M_ij. The isolated-pair law
    ``M = sin^2(pi D t_d)`` then gives the smallest positive branch. With
    ``refine`` the magnitudes are polished against the full one-excitation
    network by fitting the sampled signal with the analytic model. Pairs whose
    cross peak is below ``noise_floor`` stay missing.
    """
    if spectrum2d.dims != 2:
        raise ValueError("extract_pair_couplings needs a 2D spectrum")
    protocol = protocol or spectrum_protocol(spectrum2d)
    if protocol is None:
        raise ValueError("protocol unknown; pass it explicitly")
    t_d = spectrum2d.metadata.get("t_d_s") if t_d is None else t_d
    if not t_d or t_d <= 0:
        raise ValueError("diffusion time must be positive")
    wl = spectrum_larmor(spectrum2d)
    n = couplings.n
    est = CouplingEstimate(a=couplings.a, b=couplings.b, sigma_a=couplings.sigma_a, sigma_b=couplings.sigma_b,
                           labels=couplings.labels, composite=couplings.composite,
                           warnings=list(couplings.warnings))
    if n < 2:
        return est
    xp_ax = coupling_axis(spectrum2d, 0, protocol, wl)
    xq_ax = coupling_axis(spectrum2d, 1, protocol, wl)
    ip = np.array([int(np.argmin(np.abs(xp_ax - a))) for a in couplings.a])
    iq = np.array([int(np.argmin(np.abs(xq_ax - a))) for a in couplings.a])
    if len(set(ip)) < n or len(set(iq)) < n:
        est.warnings.append("two peaks share a grid line; their cross peaks are not separable")
    ap, aq = spectrum2d.axes
    om_p = np.asarray(ap["omega_hz"])[ip]
    tg_p = np.asarray(ap["t_g_s"])[ip]
    om_q = np.asarray(aq["omega_hz"])[iq]
    tg_q = np.asarray(aq["t_g_s"])[iq]
    xp = _transfer_table(couplings, protocol, om_p, tg_p, wl)  # (spin k, peak i)
    xq = _transfer_table(couplings, protocol, om_q, tg_q, wl)
    t = 2 * (spectrum2d.values[np.ix_(ip, iq)] - 0.5)  # T = xp^T M xq
    try:
        m = np.linalg.solve(xp.T, t) @ np.linalg.inv(xq)
    except np.linalg.LinAlgError:
        est.warnings.append("transfer table singular; falling back to isolated-peak normalisation")
        m = t / np.outer(np.diag(xp), np.diag(xq))
    asym = np.max(np.abs(m - m.T))
    if asym > 1e-3 + 1e-3 * np.max(np.abs(m)):
        est.warnings.append(f"cross peaks inconsistent with a symmetric transfer matrix (max asymmetry {asym:.3g})")
    m = 0.5 * (m + m.T)
    mask = np.abs(t) > noise_floor
    mask = mask & mask.T
    np.fill_diagonal(mask, False)
    d = np.arcsin(np.sqrt(np.clip(m, 0.0, 1.0))) / (np.pi * t_d)
    d[~mask] = np.nan
    np.fill_diagonal(d, np.nan)
    if refine and mask.any():
        s_meas = spectrum2d.values[np.ix_(ip, iq)]

        def model(dm):
            # same combination rule as analytic.twod_signal, tables reused
            pol = analytic.hopping_matrix(dm, t_d) @ xp
            return 0.5 * (2 - np.prod(1 - xq[:, None, :] * pol[:, :, None], axis=0))

        d_fit = _fit_cross_peaks(s_meas, mask, np.nan_to_num(d), model)
        d = np.where(mask, d_fit, np.nan)
    est.d = d
    est.sigma_d = sigma_d_default(d)
    return est


# -- radial inversion ------------------------------------------------------------------

@dataclass(frozen=True)
class RadialRoot:
    r_z: float  # nm, along the NV axis
    r_perp: float  # nm
    admissible: bool  # can lie in the half-space outside the diamond
    residual: float  # Hz, misfit of (A, B) at this root


def couplings_from_radial(r_z, r_perp, species: str = "13C", constants=DEFAULT_CONSTANTS):
    """(A, B_perp) in Hz of a spin at (r_z, r_perp) nm."""
    k = constants.electron_nuclear_prefactor(species)
    z = np.asarray(r_z, dtype=float) * NM
    p = np.asarray(r_perp, dtype=float) * NM
    r2 = z * z + p * p
    return k * (3 * z * z - r2) / r2 ** 2.5, k * 3 * np.abs(z) * p / r2 ** 2.5


def _half_space_ok(r_z, r_perp, nv: NvConfig, tol=DEPTH_TOL):
    n = nv.surface_normal_nv
    reach = n[2] * r_z + np.hypot(n[0], n[1]) * r_perp
    return bool(reach >= nv.depth - tol)


def invert_position(a: float, b: float, nv: Optional[NvConfig] = None, species: str = "13C",
                    constants=DEFAULT_CONSTANTS, tol: float = 1e-6) -> list:
    """All (r_z, r_perp) compatible with (A, B_perp).

    With R = sqrt(A^2 + B^2) and polar angle theta, r^3 = K sqrt(1 + 3cos^2
    theta)/R and 3 sin(2 theta - alpha) R = B with alpha = atan2(B, A). Each
    angular root comes with its mirror r_z -> -r_z. Roots are marked
    admissible when they can sit outside the diamond for ``nv``.
    """
    if b < 0:
        raise ValueError("B_perp must be non-negative")
    nv = nv or NvConfig()
    R = float(np.hypot(a, b))
    if R == 0:
        raise ReconstructionError("A = B = 0 fixes no position", residual=0.0)
    k = constants.electron_nuclear_prefactor(species)
    alpha = np.arctan2(b, a)
    s = np.clip(b / (3 * R), -1.0, 1.0)
    cands = []
    for two_theta in (alpha + np.arcsin(s), alpha + np.pi - np.arcsin(s)):
        theta = 0.5 * two_theta
        c, sn = np.cos(theta), np.sin(theta)
        if c < -1e-12 or sn < -1e-12:
            continue
        c, sn = max(c, 0.0), max(sn, 0.0)
        r = (k * np.sqrt(1 + 3 * c * c) / R) ** (1 / 3) / NM
        rz, rp = r * c, r * sn
        a_m, b_m = couplings_from_radial(rz, rp, species, constants)
        res = float(np.hypot(a_m - a, b_m - b))
        if res <= tol * max(R, 1.0) and not any(abs(rz - q[0]) < 1e-9 and abs(rp - q[1]) < 1e-9 for q in cands):
            cands.append((rz, rp, res))
    if not cands:
        raise ReconstructionError("no real (r_z, r_perp) root", residual=R)
    out = []
    for rz, rp, res in cands:
        for z in ((rz, -rz) if rz > 1e-12 else (rz,)):
            out.append(RadialRoot(float(z), float(rp), _half_space_ok(z, rp, nv), res))
    return out


# -- phases ---------------------------------------------------------------------------

@dataclass
class PhaseSolution:
    """Relative azimuths of one connected component (first spin has phase 0)."""

    members: list
    phases: np.ndarray
    mirror: np.ndarray
    cost: float
    alternatives: list = field(default_factory=list)
    determined: bool = True


def _components(mask: np.ndarray) -> list:
    n = len(mask)
    seen = [False] * n
    comps = []
    for s in range(n):
        if seen[s]:
            continue
        stack, comp = [s], []
        seen[s] = True
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in np.flatnonzero(mask[u]):
                if not seen[v]:
                    seen[v] = True
                    stack.append(int(v))
        comps.append(sorted(comp))
    return comps


def _cartesian(radial, phases):
    radial = np.asarray(radial, dtype=float)
    return np.column_stack([radial[:, 1] * np.cos(phases), radial[:, 1] * np.sin(phases), radial[:, 0]])


def _wrap(p):
    return (np.asarray(p) + np.pi) % (2 * np.pi) - np.pi


def _phase_distance(p, q):
    return float(np.max(np.abs(_wrap(np.asarray(p) - np.asarray(q))))) if len(p) else 0.0


def solve_phases(d_meas, radial, sigma_d=None, species: Optional[Sequence[str]] = None,
                 constants=DEFAULT_CONSTANTS, n_starts: int = 64, seed: int = 0) -> list:
    """Relative azimuths from |D_ij| at fixed (r_z, r_perp).

    Weighted least squares over phases with the first spin of every
    connected component fixed at 0. Returns one :class:`PhaseSolution` per
    component; ``mirror`` is the reflected solution phi -> -phi, and further
    equally good minima go to ``alternatives``.
    """
    d_meas = np.asarray(d_meas, dtype=float)
    radial = np.asarray(radial, dtype=float).reshape(-1, 2)
    n = len(radial)
    species = list(species) if species is not None else ["13C"] * n
    sigma_d = sigma_d_default(np.nan_to_num(d_meas)) if sigma_d is None else np.asarray(sigma_d, dtype=float)
    mask = np.isfinite(d_meas)
    np.fill_diagonal(mask, False)
    comps = _components(mask)
    if n > 1 and not mask.any():
        warnings.warn("no homonuclear couplings; relative phases undetermined", stacklevel=2)
    elif len(comps) > 1:
        warnings.warn(f"coupling graph has {len(comps)} components; each carries its own phase gauge", stacklevel=2)
    rng = np.random.default_rng(seed)
    out = []
    for comp in comps:
        if len(comp) == 1:
            out.append(PhaseSolution(comp, np.zeros(1), np.zeros(1), 0.0, determined=False))
            continue
        rad = radial[comp]
        sp = [species[i] for i in comp]
        pairs = [(a, b) for a in range(len(comp)) for b in range(a + 1, len(comp)) if mask[comp[a], comp[b]]]
        meas = np.array([d_meas[comp[a], comp[b]] for a, b in pairs])
        sig = np.array([sigma_d[comp[a], comp[b]] for a, b in pairs])

        def resid(x, rad=rad, sp=sp, pairs=pairs, meas=meas, sig=sig):
            ph = np.concatenate([[0.0], x])
            d = d_matrix_from_positions(_cartesian(rad, ph), sp, constants)
            return np.array([abs(d[a, b]) for a, b in pairs]) - meas

        m = len(comp) - 1
        starts = [np.zeros(m), np.full(m, np.pi / 2), np.full(m, -np.pi / 2), np.full(m, np.pi)]
        starts += [rng.uniform(-np.pi, np.pi, m) for _ in range(max(n_starts - len(starts), 0))]
        sols = []
        for x0 in starts:
            r = least_squares(lambda x: resid(x) / sig, x0, xtol=1e-14, ftol=1e-14, gtol=1e-14)
            sols.append((float(r.cost), _wrap(r.x)))
        sols.sort(key=lambda s: s[0])
        best_cost = sols[0][0]
        tol = 1e-9 + 1e-6 * best_cost
        distinct = []
        for c, x in sols:
            if c > best_cost + tol:
                break
            if all(_phase_distance(x, y) > 1e-4 and _phase_distance(-x, y) > 1e-4 for y in distinct):
                distinct.append(x)
        best = distinct[0]
        phases = np.concatenate([[0.0], best])
        alts = [np.concatenate([[0.0], y]) for y in distinct[1:]]
        out.append(PhaseSolution(comp, phases, _wrap(-phases), best_cost, alts))
    return out


# -- uncertainty ------------------------------------------------------------------------

@dataclass
class Uncertainty:
    covariance: np.ndarray  # (n, 3, 3) nm^2
    volumes: list  # A^3 per spin, None when a direction is unconstrained
    unconstrained: list  # per spin: list of unit vectors (NV frame)
    gauge_modes: int


def _hyperfine_many(p, species, constants):
    """(n, 3) dipolar vectors, one vectorised call per species."""
    mu = np.empty((len(p), 3))
    species = np.asarray(species)
    for sp in set(species.tolist()):
        idx = np.flatnonzero(species == sp)
        mu[idx] = _dipolar_many(p[idx], constants.electron_nuclear_prefactor(sp))
    return mu


def _measurements(x_flat, species, pairs, constants):
    p = x_flat.reshape(-1, 3)
    mu = _hyperfine_many(p, species, constants)
    out = [mu[:, 2], np.hypot(mu[:, 0], mu[:, 1])]
    if pairs:
        d = d_matrix_from_positions(p, species, constants)
        out.append(np.array([d[i, j] for i, j in pairs]))
    return np.concatenate(out)


def measurement_jacobian(positions, species=None, pairs=(), constants=DEFAULT_CONSTANTS,
                         step: float = FD_STEP_NM) -> np.ndarray:
    """Central-difference Jacobian of [A_i, B_i, D_pairs] w.r.t. all coordinates (Hz/nm)."""
    x0 = np.asarray(positions, dtype=float).ravel()
    species = list(species) if species is not None else ["13C"] * (len(x0) // 3)
    cols = []
    for k in range(len(x0)):
        e = np.zeros_like(x0)
        e[k] = step
        cols.append((_measurements(x0 + e, species, list(pairs), constants)
                     - _measurements(x0 - e, species, list(pairs), constants)) / (2 * step))
    return np.column_stack(cols)


def _gauge_vectors(positions, comps):
    p = np.asarray(positions, dtype=float)
    vecs = []
    for comp in comps:
        g = np.zeros(p.size)
        for i in comp:
            g[3 * i:3 * i + 3] = (-p[i, 1], p[i, 0], 0.0)
        nrm = np.linalg.norm(g)
        if nrm > 1e-12:
            vecs.append(g / nrm)
    return np.array(vecs).reshape(-1, p.size)


def estimate_uncertainty(positions, species=None, d_mask=None, sigma_a=SIGMA_A, sigma_b=SIGMA_B,
                         sigma_d=None, d_values=None, constants=DEFAULT_CONSTANTS,
                         step: float = FD_STEP_NM, unconstrained_nm: float = 10.0) -> Uncertainty:
    """Local linear error propagation about ``positions`` (nm, NV frame).

    The covariance is (J^T W J)^-1 with W = diag(1/sigma^2) over every A, B
    and every D pair in ``d_mask`` (default all pairs). Rotations about the
    NV axis, one per connected component of the D graph, are gauge modes and
    are projected out. Remaining null directions are reported per spin as
    unconstrained (standard deviation above ``unconstrained_nm``) instead of
    a volume. Volumes are (4 pi/3) sqrt(det) in cubic angstrom.
    """
    p = np.asarray(positions, dtype=float).reshape(-1, 3)
    n = len(p)
    species = list(species) if species is not None else ["13C"] * n
    if d_mask is None:
        d_mask = ~np.eye(n, dtype=bool)
    d_mask = np.asarray(d_mask, dtype=bool) & ~np.eye(n, dtype=bool)
    d_mask = d_mask | d_mask.T
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if d_mask[i, j]]
    jac = measurement_jacobian(p, species, pairs, constants, step)
    if d_values is None:
        d_model = d_matrix_from_positions(p, species, constants) if n > 1 else np.zeros((n, n))
        d_values = np.abs(d_model)
    d_values = np.asarray(d_values, dtype=float)
    if sigma_d is None:
        sd = np.array([sigma_d_default(d_values[i, j]) for i, j in pairs])
    elif np.ndim(sigma_d) == 0:
        sd = np.full(len(pairs), float(sigma_d))
    else:
        sd = np.array([np.asarray(sigma_d)[i, j] for i, j in pairs])
    sig = np.concatenate([np.broadcast_to(np.asarray(sigma_a, float), (n,)),
                          np.broadcast_to(np.asarray(sigma_b, float), (n,)), sd])
    w = 1.0 / np.maximum(sig, 1e-300) ** 2
    normal = jac.T @ (w[:, None] * jac)
    comps = _components(d_mask)
    gauge = _gauge_vectors(p, comps)
    proj = np.eye(3 * n) - gauge.T @ gauge if len(gauge) else np.eye(3 * n)
    nm_ = proj @ normal @ proj
    nm_ = 0.5 * (nm_ + nm_.T)
    ev, evec = np.linalg.eigh(nm_)
    scale = max(float(ev.max()), 1e-300)
    keep = ev > max(1e-14 * scale, 1.0 / unconstrained_nm ** 2)
    n_gauge = len(gauge)
    null = evec[:, ~keep]
    # drop the gauge directions themselves from the null set
    if n_gauge and null.size:
        null = null - gauge.T @ (gauge @ null)
        u, s, _ = np.linalg.svd(null, full_matrices=False)
        null = u[:, s > 1e-6]
    cov = (evec[:, keep] / ev[keep]) @ evec[:, keep].T
    cov = 0.5 * (cov + cov.T)
    blocks = np.array([cov[3 * i:3 * i + 3, 3 * i:3 * i + 3] for i in range(n)])
    iso = {c[0] for c in comps if len(c) == 1}
    volumes, unconstr = [], []
    for i in range(n):
        dirs = []
        if null.size:
            sub = null[3 * i:3 * i + 3]
            u, s, _ = np.linalg.svd(sub, full_matrices=False)
            dirs = [u[:, k] for k in range(len(s)) if s[k] > 1e-6]
        if i in iso and np.hypot(p[i, 0], p[i, 1]) > 1e-12:
            dirs.append(np.array([-p[i, 1], p[i, 0], 0.0]) / np.hypot(p[i, 0], p[i, 1]))
        unconstr.append(dirs)
        if dirs:
            volumes.append(None)
        else:
            det = max(float(np.linalg.det(blocks[i])), 0.0)
            volumes.append(float(4 * np.pi / 3 * np.sqrt(det) * 1e3))
    return Uncertainty(covariance=blocks, volumes=volumes, unconstrained=unconstr, gauge_modes=n_gauge)


def covariance_is_psd(cov, rel_tol: float = 1e-10) -> bool:
    cov = np.asarray(cov, dtype=float)
    if not np.allclose(cov, cov.T, atol=1e-12 * max(np.abs(cov).max(), 1e-300)):
        return False
    return bool(np.linalg.eigvalsh(cov).min() >= -rel_tol * max(np.trace(cov), 0.0))


# -- pipeline ----------------------------------------------------------------------------

@dataclass
class Reconstruction:
    labels: list
    positions: np.ndarray  # (n, 3) nm, NV frame
    mirror_positions: np.ndarray
    roots: list  # per spin: list of RadialRoot
    branch_choice: list  # per spin: index into roots
    covariance: np.ndarray  # (n, 3, 3) nm^2
    volumes: list  # A^3 or None
    residuals: dict
    components: list
    phases_determined: list
    couplings: CouplingEstimate
    warnings: list = field(default_factory=list)
    unconstrained: list = field(default_factory=list)

    @property
    def cylindrical(self) -> np.ndarray:
        """(r_z, r_perp, phi) per spin."""
        p = self.positions
        return np.column_stack([p[:, 2], np.hypot(p[:, 0], p[:, 1]), np.arctan2(p[:, 1], p[:, 0])])

    def to_dict(self) -> dict:
        cyl = self.cylindrical
        spins = []
        for i, lab in enumerate(self.labels):
            spins.append({
                "label": lab,
                "A_hz": float(self.couplings.a[i]), "B_hz": float(self.couplings.b[i]),
                "position_nm": [float(v) for v in self.positions[i]],
                "mirror_position_nm": [float(v) for v in self.mirror_positions[i]],
                "r_z_nm": float(cyl[i, 0]), "r_perp_nm": float(cyl[i, 1]), "phi_rad": float(cyl[i, 2]),
                "phase_determined": bool(self.phases_determined[i]),
                "roots": [{"r_z_nm": r.r_z, "r_perp_nm": r.r_perp, "admissible": r.admissible,
                           "residual_hz": r.residual} for r in self.roots[i]],
                "branch_choice": int(self.branch_choice[i]),
                "covariance_nm2": self.covariance[i].tolist(),
                "volume_A3": self.volumes[i],
                "unconstrained_directions": [list(map(float, d)) for d in self.unconstrained[i]]
                if self.unconstrained else [],
                "possibly_composite": bool(self.couplings.composite[i]),
            })
        n = len(self.labels)
        n_d = int(np.isfinite(self.couplings.d[np.triu_indices(n, 1)]).sum()) if n > 1 else 0
        return {"spins": spins, "components": self.components, "residuals": self.residuals,
                "constraints": {"available": 2 * n + n_d, "maximum": constraint_count(n), "unknowns": 3 * n - 1},
                "warnings": list(self.warnings)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def summary(self) -> str:
        lines = [f"{'spin':>8} {'A/Hz':>9} {'B/Hz':>8} {'r_z/nm':>7} {'r_p/nm':>7} {'phi/rad':>8} {'vol/A^3':>8}"]
        cyl = self.cylindrical
        for i, lab in enumerate(self.labels):
            vol = "-" if self.volumes[i] is None else f"{self.volumes[i]:.2f}"
            phi = f"{cyl[i, 2]:8.4f}" if self.phases_determined[i] else f"{'undet.':>8}"
            lines.append(f"{lab:>8} {self.couplings.a[i]:9.1f} {self.couplings.b[i]:8.1f} {cyl[i, 0]:7.4f} "
                         f"{cyl[i, 1]:7.4f} {phi} {vol:>8}")
        for w in self.warnings:
            lines.append(f"warning: {w}")
        return "\n".join(lines) + "\n"


def _choose_roots(roots):
    adm = [k for k, r in enumerate(roots) if r.admissible]
    return adm or list(range(len(roots)))


def reconstruct_from_couplings(est: CouplingEstimate, nv: Optional[NvConfig] = None, species: str = "13C",
                               constants=DEFAULT_CONSTANTS, refine: bool = True, priors: Optional[dict] = None,
                               seed: int = 0, max_combinations: int = 256) -> Reconstruction:
    """Positions, phases and uncertainties from coupling estimates.

    Every admissible radial root is kept. When more than one is admissible
    for a spin, the root combinations are ranked by their D misfit. With
    ``refine`` all coordinates are then polished jointly against every
    measured coupling. ``priors`` may hold ``bonds``, a list of
    ``(i, j, length_nm, sigma_nm)``, added as quadratic penalties.
    """
    nv = nv or NvConfig()
    n = est.n
    sp = [species] * n
    warn = list(est.warnings)
    roots = [invert_position(est.a[i], est.b[i], nv, species, constants, tol=1e-3) for i in range(n)]
    options = [_choose_roots(r) for r in roots]
    for i, opt in enumerate(options):
        if len(opt) > 1:
            warn.append(f"{est.labels[i]}: {len(opt)} admissible radial roots")
        if not any(roots[i][k].admissible for k in opt):
            warn.append(f"{est.labels[i]}: no root outside the diamond")
    combos = list(itertools.product(*options))
    if len(combos) > max_combinations:
        warn.append(f"{len(combos)} root combinations; only the first {max_combinations} were ranked")
        combos = combos[:max_combinations]
    d_meas = est.d
    mask = np.isfinite(d_meas)
    best = None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for combo in combos:
            radial = np.array([[roots[i][k].r_z, roots[i][k].r_perp] for i, k in enumerate(combo)])
            sols = solve_phases(d_meas, radial, est.sigma_d, sp, constants, seed=seed)
            cost = sum(s.cost for s in sols)
            if best is None or cost < best[0] - 1e-12:
                best = (cost, combo, radial, sols)
    _, combo, radial, sols = best
    if n > 1 and not mask.any():
        warn.append("no 2D data; relative phases undetermined")
    phases = np.zeros(n)
    determined = [False] * n
    for s in sols:
        phases[s.members] = s.phases
        for i in s.members:
            determined[i] = s.determined
        if s.alternatives:
            warn.append(f"component {s.members}: {len(s.alternatives)} further phase solution(s) fit equally well")
    pos = _cartesian(radial, phases)
    comps = [s.members for s in sols]
    if refine and n:
        pos = _refine(pos, est, sp, mask, constants, priors, comps)
    mirror = pos * np.array([1.0, -1.0, 1.0])
    resid = _residuals(pos, est, sp, mask, constants)
    unc = estimate_uncertainty(pos, sp, mask, est.sigma_a, est.sigma_b,
                               sigma_d=np.where(mask, est.sigma_d, np.inf), d_values=np.nan_to_num(d_meas),
                               constants=constants)
    for i in range(n):
        if not covariance_is_psd(unc.covariance[i]):
            warn.append(f"{est.labels[i]}: covariance failed the PSD check")
    return Reconstruction(labels=list(est.labels), positions=pos, mirror_positions=mirror, roots=roots,
                          branch_choice=list(combo), covariance=unc.covariance, volumes=unc.volumes,
                          residuals=resid, components=comps, phases_determined=determined, couplings=est,
                          warnings=warn, unconstrained=unc.unconstrained)


def _residuals(pos, est, species, mask, constants):
    n = len(pos)
    mu = _hyperfine_many(pos, species, constants)
    out = {"A_hz": (mu[:, 2] - est.a).tolist(), "B_hz": (np.hypot(mu[:, 0], mu[:, 1]) - est.b).tolist()}
    if n > 1:
        d = np.abs(d_matrix_from_positions(pos, species, constants))
        out["D_hz"] = [[i, j, float(d[i, j] - est.d[i, j])] for i in range(n) for j in range(i + 1, n)
                       if mask[i, j]]
    return out


def _refine(pos, est, species, mask, constants, priors, comps):
    n = len(pos)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if mask[i, j]]
    bonds = (priors or {}).get("bonds", [])

    def resid(x):
        p = x.reshape(n, 3)
        mu = _hyperfine_many(p, species, constants)
        r = [(mu[:, 2] - est.a) / est.sigma_a, (np.hypot(mu[:, 0], mu[:, 1]) - est.b) / est.sigma_b]
        if pairs:
            d = np.abs(d_matrix_from_positions(p, species, constants))
            r.append(np.array([(d[i, j] - est.d[i, j]) / est.sigma_d[i, j] for i, j in pairs]))
        if bonds:
            r.append(np.array([(np.linalg.norm(p[i] - p[j]) - L) / s for i, j, L, s in bonds]))
        return np.concatenate(r)

    r = least_squares(resid, pos.ravel(), x_scale=0.01, xtol=1e-15, ftol=1e-15, gtol=1e-15,
                      max_nfev=20 * pos.size)
    new = r.x.reshape(n, 3)
    # restore the gauge: first spin of each component back on its start azimuth
    for comp in comps:
        i0 = comp[0]
        d_phi = np.arctan2(pos[i0, 1], pos[i0, 0]) - np.arctan2(new[i0, 1], new[i0, 0])
        if np.hypot(new[i0, 0], new[i0, 1]) < 1e-12:
            continue
        c, s = np.cos(d_phi), np.sin(d_phi)
        rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        new[comp] = new[comp] @ rot.T
    return new


def reconstruct(spectrum1d: Spectrum, spectrum2d: Optional[Spectrum] = None, nv: Optional[NvConfig] = None,
                protocol: Optional[PulseProtocol] = None, sigma_a: float = SIGMA_A, sigma_b: float = SIGMA_B,
                threshold: float = DIP_THRESHOLD, noise_floor: float = 1e-6, species: str = "13C",
                constants: PhysicalConstants = DEFAULT_CONSTANTS, seed: int = 0, refine_peaks: bool = True,
                **kw) -> Reconstruction:
    """Full inversion: peaks -> (A, B) -> optional |D| -> positions and volumes.

    With ``refine_peaks`` the peak-picked couplings are polished against the
    analytic 1D model before the 2D step.
    """
    protocol = protocol or spectrum_protocol(spectrum1d)
    if protocol is None:
        raise ValueError("protocol unknown; pass it explicitly")
    if nv is None:
        depth = spectrum1d.metadata.get("system", {}).get("nv_depth_nm", 1.75)
        nv = NvConfig.for_larmor(spectrum_larmor(spectrum1d), species, constants, depth=depth)
    peaks = pick_peaks(spectrum1d, threshold, protocol=protocol)
    if not len(peaks):
        raise ReconstructionError("no peaks found")
    est = extract_couplings(peaks, protocol, sigma_a, sigma_b)
    if refine_peaks:
        est = refine_couplings(spectrum1d, est, protocol)
    if spectrum2d is not None:
        est = extract_pair_couplings(spectrum2d, est, protocol=spectrum_protocol(spectrum2d) or protocol,
                                     noise_floor=noise_floor)
    return reconstruct_from_couplings(est, nv, species, constants, seed=seed, **kw)
