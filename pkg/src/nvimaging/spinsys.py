"""NV + nuclear spin geometry and the static couplings derived from it.

Frames
------
The *lab* frame has the diamond surface normal along +z with the NV at the
origin; the surface plane sits at ``z = depth``. The *NV* frame is the lab
frame rotated so that the NV symmetry axis becomes +z. Every coupling in this
module is computed in the NV frame, and all couplings are linear frequencies
(Hz).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .constants import DEFAULT_CONSTANTS, NM, PhysicalConstants


class GeometryError(ValueError):
    """Raised for degenerate geometry (coincident spins, spin on the NV)."""


def rotation_to_z(axis) -> np.ndarray:
    """Proper rotation matrix ``R`` with ``R @ axis == (0, 0, 1)``.

    Uses the minimal rotation about ``axis x z``; the antiparallel case is a
    half turn about x.
    """
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    z = np.array([0.0, 0.0, 1.0])
    c = float(a @ z)
    if c > 1 - 1e-15:
        return np.eye(3)
    if c < -1 + 1e-15:
        return np.diag([1.0, -1.0, -1.0])
    v = np.cross(a, z)
    s = np.linalg.norm(v)
    k = v / s
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + s * kx + (1 - c) * kx @ kx


@dataclass(frozen=True)
class NvConfig:
    """NV placement and drive.

    ``axis`` is the NV symmetry axis expressed in the lab frame (surface
    normal = +z). ``b_field`` is the static field along the NV axis in tesla.
    """

    depth: float = 1.75
    axis: tuple = (0.0, 0.0, 1.0)
    rabi_frequency: Optional[float] = None
    b_field: float = 0.0

    def __post_init__(self):
        if not self.depth > 0:
            raise ValueError("NV depth must be positive")
        ax = np.asarray(self.axis, dtype=float)
        if ax.shape != (3,):
            raise ValueError("axis must be a 3-vector")
        if abs(np.linalg.norm(ax) - 1.0) > 1e-12:
            raise ValueError("axis must have unit norm")
        object.__setattr__(self, "axis", tuple(float(v) for v in ax))

    @classmethod
    def for_larmor(cls, omega_L: float, species: str = "13C", constants=DEFAULT_CONSTANTS, **kw):
        """Config whose field gives nuclear Larmor frequency ``omega_L`` (Hz)."""
        return cls(b_field=omega_L / abs(constants.gamma(species)), **kw)

    @property
    def rotation(self) -> np.ndarray:
        """Lab -> NV frame rotation."""
        return rotation_to_z(self.axis)

    def to_nv_frame(self, points_lab) -> np.ndarray:
        return np.asarray(points_lab, dtype=float) @ self.rotation.T

    def to_lab_frame(self, points_nv) -> np.ndarray:
        return np.asarray(points_nv, dtype=float) @ self.rotation

    @property
    def surface_normal_nv(self) -> np.ndarray:
        """Lab +z expressed in the NV frame."""
        return self.rotation @ np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class NuclearSpin:
    """One nuclear spin. ``position`` is in nm, NV frame; ``None`` for spins
    defined only through their couplings."""

    species: str = "13C"
    position: Optional[tuple] = None
    label: str = ""

    def __post_init__(self):
        if self.position is not None:
            p = np.asarray(self.position, dtype=float)
            if p.shape != (3,) or not np.all(np.isfinite(p)):
                raise GeometryError(f"bad position for spin {self.label!r}")
            if np.linalg.norm(p) == 0:
                raise GeometryError(f"spin {self.label!r} coincides with the NV")
            object.__setattr__(self, "position", tuple(float(v) for v in p))


@dataclass(frozen=True)
class HyperfineCoupling:
    """Longitudinal ``a_par``, transverse ``b_perp`` (Hz) and azimuth ``phi``."""

    a_par: float
    b_perp: float
    phi: float = 0.0

    def __post_init__(self):
        if self.b_perp < 0:
            raise ValueError("b_perp must be non-negative")

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.b_perp * np.cos(self.phi), self.b_perp * np.sin(self.phi), self.a_par])


def dipolar_vector(position, species: str = "13C", constants: PhysicalConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """NV-nucleus dipolar coupling vector (Hz) for a spin at ``position`` (nm, NV frame).

    Returns ``K/r^5 * (3 z x, 3 z y, 3 z^2 - r^2)`` with
    ``K = (mu0/4pi)(hbar/2pi) gamma_e gamma_n``.
    """
    r = np.asarray(position, dtype=float) * NM
    r2 = float(r @ r)
    if r2 == 0.0:
        raise GeometryError("dipolar field undefined at the NV position")
    k = constants.electron_nuclear_prefactor(species)
    pref = k / r2 ** 2.5
    x, y, z = r
    return pref * np.array([3 * z * x, 3 * z * y, 3 * z * z - r2])


def _dipolar_many(points_nm: np.ndarray, k: float) -> np.ndarray:
    r = np.asarray(points_nm, dtype=float) * NM
    r2 = np.einsum("ij,ij->i", r, r)
    if np.any(r2 == 0):
        raise GeometryError("dipolar field undefined at the NV position")
    pref = k / r2 ** 2.5
    z = r[:, 2]
    return pref[:, None] * np.column_stack([3 * z * r[:, 0], 3 * z * r[:, 1], 3 * z * z - r2])


def coupling_from_vector(mu) -> HyperfineCoupling:
    mx, my, mz = (float(v) for v in mu)
    b = float(np.hypot(mx, my))
    phi = float(np.arctan2(my, mx)) % (2 * np.pi) if b > 0 else 0.0
    return HyperfineCoupling(a_par=mz, b_perp=b, phi=phi)


def hyperfine_from_position(spin: NuclearSpin, nv: Optional[NvConfig] = None,
                            constants: PhysicalConstants = DEFAULT_CONSTANTS) -> HyperfineCoupling:
    """(A, B_perp, phi) of ``spin``. ``phi`` is 0 by convention when B_perp = 0.

    ``nv`` is accepted for interface symmetry; positions are already in the NV
    frame.
    """
    if spin.position is None:
        raise GeometryError(f"spin {spin.label!r} has no position")
    return coupling_from_vector(dipolar_vector(spin.position, spin.species, constants))


def homonuclear_coupling(spin_i: NuclearSpin, spin_j: NuclearSpin,
                         constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    """Secular dipolar coupling D_ij (Hz), quantization axis = NV axis.

    ``D = (mu0/4pi)(hbar/2pi) gamma_i gamma_j (1 - 3 cos^2 theta) / r^3``.
    """
    d = np.subtract(spin_j.position, spin_i.position) * NM
    r2 = float(d @ d)
    if r2 == 0.0:
        raise GeometryError(f"spins {spin_i.label!r} and {spin_j.label!r} coincide")
    cos2 = d[2] ** 2 / r2
    k = constants.nuclear_nuclear_prefactor(spin_i.species, spin_j.species)
    return k * (1 - 3 * cos2) / r2 ** 1.5


def d_matrix_from_positions(positions_nm, species: Sequence[str], constants=DEFAULT_CONSTANTS) -> np.ndarray:
    """Vectorised homonuclear coupling matrix (Hz), zero diagonal."""
    p = np.asarray(positions_nm, dtype=float) * NM
    n = len(p)
    gam = np.array([constants.gamma(s) for s in species])
    diff = p[None, :, :] - p[:, None, :]
    r2 = np.einsum("ijk,ijk->ij", diff, diff)
    off = ~np.eye(n, dtype=bool)
    if np.any(r2[off] == 0):
        raise GeometryError("coincident spins")
    k = (constants.mu0 / (4 * np.pi)) * (constants.hbar / (2 * np.pi)) * (2 * np.pi) ** 2
    d = np.zeros((n, n))
    cos2 = diff[..., 2][off] ** 2 / r2[off]
    d[off] = k * np.outer(gam, gam)[off] * (1 - 3 * cos2) / r2[off] ** 1.5
    return 0.5 * (d + d.T)


@dataclass(frozen=True, eq=False)
class SpinSystem:
    """NV plus nuclear spins with all static couplings precomputed.

    ``larmor`` holds per-spin Larmor frequencies (Hz); ``omega_L`` is their
    common value and is only defined for single-species systems.
    """

    nv: NvConfig
    spins: tuple
    hyperfine: tuple
    d_matrix: np.ndarray
    larmor: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.spins)
        if len(self.hyperfine) != n:
            raise ValueError("hyperfine list length differs from spin count")
        d = np.asarray(self.d_matrix, dtype=float).reshape(n, n)
        if not np.array_equal(d, d.T) or np.any(np.diag(d) != 0):
            raise ValueError("d_matrix must be symmetric with zero diagonal")
        d.setflags(write=False)
        object.__setattr__(self, "d_matrix", d)
        lar = np.asarray(self.larmor, dtype=float).reshape(n)
        lar.setflags(write=False)
        object.__setattr__(self, "larmor", lar)

    # -- constructors -----------------------------------------------------
    @classmethod
    def from_spins(cls, nv: NvConfig, spins: Sequence[NuclearSpin], constants=DEFAULT_CONSTANTS):
        spins = tuple(spins)
        hf = tuple(hyperfine_from_position(s, nv, constants) for s in spins)
        if spins:
            d = d_matrix_from_positions([s.position for s in spins], [s.species for s in spins], constants)
        else:
            d = np.zeros((0, 0))
        lar = np.array([abs(constants.gamma(s.species)) * nv.b_field for s in spins])
        return cls(nv=nv, spins=spins, hyperfine=hf, d_matrix=d, larmor=lar)

    @classmethod
    def from_couplings(cls, a, b, phi=None, omega_L: float = 2e6, d_matrix=None,
                       species: str = "13C", nv: Optional[NvConfig] = None, labels=None):
        """Abstract system defined directly by its couplings (no positions)."""
        a = np.atleast_1d(np.asarray(a, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        n = len(a)
        phi = np.zeros(n) if phi is None else np.atleast_1d(np.asarray(phi, dtype=float))
        labels = labels or [f"s{k}" for k in range(n)]
        spins = tuple(NuclearSpin(species=species, label=labels[k]) for k in range(n))
        hf = tuple(HyperfineCoupling(float(a[k]), float(b[k]), float(phi[k]) % (2 * np.pi)) for k in range(n))
        d = np.zeros((n, n)) if d_matrix is None else np.asarray(d_matrix, dtype=float)
        nv = nv or NvConfig.for_larmor(omega_L, species)
        return cls(nv=nv, spins=spins, hyperfine=hf, d_matrix=d, larmor=np.full(n, float(omega_L)))

    # -- views ------------------------------------------------------------
    def __len__(self):
        return len(self.spins)

    @property
    def n_spins(self) -> int:
        return len(self.spins)

    @property
    def omega_L(self) -> float:
        if len(self.larmor) == 0:
            return 0.0
        if np.ptp(self.larmor) > 1e-9 * abs(self.larmor[0]):
            raise ValueError("omega_L undefined for a mixed-species system")
        return float(self.larmor[0])

    @property
    def a(self) -> np.ndarray:
        return np.array([h.a_par for h in self.hyperfine])

    @property
    def b(self) -> np.ndarray:
        return np.array([h.b_perp for h in self.hyperfine])

    @property
    def phi(self) -> np.ndarray:
        return np.array([h.phi for h in self.hyperfine])

    @property
    def positions(self) -> np.ndarray:
        return np.array([s.position for s in self.spins], dtype=float).reshape(-1, 3)

    @property
    def species(self) -> list:
        return [s.species for s in self.spins]

    @property
    def labels(self) -> list:
        return [s.label for s in self.spins]

    def subset(self, indices) -> "SpinSystem":
        idx = list(indices)
        return SpinSystem(nv=self.nv, spins=tuple(self.spins[i] for i in idx),
                          hyperfine=tuple(self.hyperfine[i] for i in idx),
                          d_matrix=self.d_matrix[np.ix_(idx, idx)], larmor=self.larmor[idx])

    def fingerprint(self) -> dict:
        return {
            "n_spins": self.n_spins,
            "labels": self.labels,
            "a_hz": [round(float(v), 6) for v in self.a],
            "b_hz": [round(float(v), 6) for v in self.b],
            "larmor_hz": [round(float(v), 6) for v in self.larmor],
            "nv_depth_nm": self.nv.depth,
        }


def gradient_shift(spin_index: int, system: SpinSystem) -> float:
    """Precession frequency ``omega_L + A`` (Hz) of a spin while the NV sits in
    its magnetic state."""
    return float(system.larmor[spin_index] + system.hyperfine[spin_index].a_par)


def field_map(nv: NvConfig, grid_lab, species: str = "13C", constants=DEFAULT_CONSTANTS) -> np.ndarray:
    """Longitudinal coupling A(r) in Hz at every lab-frame grid point (nm).

    Divide by ``gamma_n`` for the equivalent field in tesla.
    """
    pts = np.asarray(grid_lab, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty grid")
    k = constants.electron_nuclear_prefactor(species)
    return _dipolar_many(nv.to_nv_frame(pts), k)[:, 2]


def slab_grid(x_range, y_range, z_range, shape=(21, 21, 5)) -> np.ndarray:
    """Regular lab-frame grid, (N, 3) points in nm."""
    axes = [np.linspace(lo, hi, n) for (lo, hi), n in zip((x_range, y_range, z_range), shape)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([a.ravel() for a in g])


def field_map_csv(points_lab, shift_hz) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x_nm", "y_nm", "z_nm", "shift_hz"])
    for p, s in zip(np.asarray(points_lab).reshape(-1, 3), shift_hz):
        w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), repr(float(s))])
    return buf.getvalue()
