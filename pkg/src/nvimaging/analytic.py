"""Closed-form signal models.

Every frequency argument is a linear frequency in Hz; the factors of 2 pi are
applied here. Signals are returned unclamped so that formula errors surface.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

# WAHUHA first-order factors. The averaged z field lies along [111] with
# length 1/sqrt(3); the transverse flip-flop amplitude is (2 + sqrt3)/(3 sqrt3),
# which is also sqrt(7 + 4 sqrt3)/(3 sqrt3).
WAHUHA_FIELD_SCALE = 1.0 / np.sqrt(3.0)
WAHUHA_RATE_SCALE = (2.0 + np.sqrt(3.0)) / (3.0 * np.sqrt(3.0))
DEFAULT_MEMORY_T2 = 9e-3
BRANCH_RADIUS = 1e-9

DECOUPLING_KINDS = ("none", "ideal", "wahuha")


@dataclass(frozen=True)
class CpmgParams:
    """``2 * n_pairs`` pi pulses spaced by ``tau``; per-spin couplings in Hz."""

    tau: float
    n_pairs: int
    omega_L: float
    a: tuple
    b: tuple
    phi: Optional[tuple] = None

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")
        a = tuple(float(v) for v in np.atleast_1d(self.a))
        b = tuple(float(v) for v in np.atleast_1d(self.b))
        if len(a) != len(b):
            raise ValueError("a and b differ in length")
        phi = (0.0,) * len(a) if self.phi is None else tuple(float(v) for v in np.atleast_1d(self.phi))
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "phi", phi)


@dataclass(frozen=True)
class FilterParams:
    """Filter settings: ``F`` repetitions, gradient interval ``t_g`` (s) and
    total spin-lock time ``t`` (s). ``harmonic`` records the grating order
    used to choose ``t_g``, if any."""

    F: int
    t_g: float
    t: float
    harmonic: Optional[int] = None
    memory_t2: float = DEFAULT_MEMORY_T2
    allow_long_memory: bool = False

    def __post_init__(self):
        if int(self.F) != self.F or self.F < 1:
            raise ValueError("F must be a positive integer")
        if self.t_g < 0:
            raise ValueError("t_g must be non-negative")
        if not self.t > 0:
            raise ValueError("t must be positive")
        if not self.allow_long_memory and self.F * self.t_g > self.memory_t2 * (1 + 1e-12):
            raise ValueError(f"F*t_g = {self.F * self.t_g:.4g} s exceeds the memory time {self.memory_t2:.4g} s")


@dataclass(frozen=True)
class TwoDPeakParams:
    b_i: float
    b_j: float
    d_ij: float
    t: float
    t_d: float

    def __post_init__(self):
        if self.t < 0 or self.t_d < 0:
            raise ValueError("times must be non-negative")


# -- decoupling bookkeeping ------------------------------------------------

@dataclass(frozen=True)
class CouplingScales:
    """How decoupling rescales what a spin sees.

    lock: fraction of A shifting the spin-lock resonance.
    rate: factor on the transverse transfer rate.
    gradient: fraction of A seen during the gradient interval.
    """

    lock: float = 1.0
    rate: float = 1.0
    gradient: float = 1.0


def decoupling_scales(decoupling: str = "none", lock_shift: Optional[float] = None) -> CouplingScales:
    """Scales for ``decoupling`` in {none, ideal, wahuha}.

    ``lock_shift`` is the fraction of A the nucleus sees while the NV is
    spin-locked: 1 by default without decoupling, 1/2 by default under WAHUHA.
    """
    if decoupling not in DECOUPLING_KINDS:
        raise ValueError(f"unknown decoupling {decoupling!r}")
    if decoupling == "wahuha":
        ls = 0.5 if lock_shift is None else lock_shift
        return CouplingScales(lock=ls * WAHUHA_FIELD_SCALE, rate=WAHUHA_RATE_SCALE, gradient=WAHUHA_FIELD_SCALE)
    return CouplingScales(lock=1.0 if lock_shift is None else lock_shift)


# -- dynamical decoupling ----------------------------------------------------

def cpmg_pseudo_signal(tau, n_pairs, omega_L, a, b, phi=0.0):
    """Pseudo-spin signal of one nucleus under ``2 n`` pi pulses (vectorised
    over ``tau``).

    ``phi`` drops out of the signal; it is accepted for symmetry.
    """
    tau = np.asarray(tau, dtype=float)
    w0 = 2 * np.pi * omega_L
    v1 = np.array([b, 0.0, omega_L + a]) * 2 * np.pi
    w1 = float(np.linalg.norm(v1))
    if w1 == 0 or w0 == 0:
        return np.ones_like(tau)
    u0 = np.array([0.0, 0.0, np.sign(w0)])
    u1 = v1 / w1
    w0 = abs(w0)
    dot = float(u0 @ u1)
    cross2 = float(np.sum(np.cross(u0, u1) ** 2))
    cos_a = np.cos(w0 * tau / 2) * np.cos(w1 * tau / 2) - dot * np.sin(w0 * tau / 2) * np.sin(w1 * tau / 2)
    alpha = np.arccos(np.clip(cos_a, -1.0, 1.0))
    c_half = np.cos(alpha / 2)
    near = np.abs(c_half) < BRANCH_RADIUS
    safe = np.where(near, 1.0, c_half)
    ratio = np.where(near, 4.0 * n_pairs ** 2, np.sin(n_pairs * alpha) ** 2 / safe ** 2)
    return 1 - 2 * cross2 * np.sin(w0 * tau / 4) ** 2 * np.sin(w1 * tau / 4) ** 2 * ratio


def cpmg_signal(params: CpmgParams):
    """Per-spin pseudo-signals (list) and the product signal ``(1 + prod)/2``."""
    per = [float(cpmg_pseudo_signal(params.tau, params.n_pairs, params.omega_L, a, b, p))
           for a, b, p in zip(params.a, params.b, params.phi)]
    return per, 0.5 * (1 + float(np.prod(per)))


def cpmg_dip_times(omega_L: float, a: float, k_max: int = 3) -> np.ndarray:
    """Approximate dip spacings ``(2k+1)/(2 (omega_L + A/2))`` in s."""
    k = np.arange(k_max + 1)
    return (2 * k + 1) / (2 * (omega_L + a / 2))


# -- cross-polarisation ------------------------------------------------------

def hh_dip(Omega, A, B, omega_L, t, sign: int = 1):
    """Single-spin spin-lock signal with a detuned Rabi-type transfer.

    Detuning is ``Omega - sign*(A + omega_L)``; the transfer frequency is
    ``sqrt(B^2 + detuning^2)`` in Hz. Broadcasts over all arguments.
    """
    Omega, A, B, omega_L, t = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (Omega, A, B, omega_L, t)))
    det = Omega - sign * (A + omega_L)
    w2 = B ** 2 + det ** 2
    arg = np.pi * t * np.sqrt(w2)
    small = arg < BRANCH_RADIUS
    safe = np.where(small | (w2 == 0), 1.0, w2)
    frac = np.where(small, B ** 2 * (np.pi * t) ** 2, B ** 2 * np.sin(arg) ** 2 / safe)
    out = 1 - frac / 2
    return out if out.ndim else float(out)


def transfer_fraction(Omega, A, B, omega_L, t):
    """Polarisation handed to one spin, ``2 (1 - S)``."""
    return 2 * (1 - np.asarray(hh_dip(Omega, A, B, omega_L, t)))


# -- filter ------------------------------------------------------------------

def filter_value(F: int, t_g, A, omega_L):
    """Grating sum ``(1/F) sum_k exp(i 2 pi k t_g (omega_L + A))`` and its modulus.

    The phase product is reduced modulo 1 before the closed form so the result
    stays accurate at large harmonics. The resonant limit (|G| = 1) is taken
    exactly by ``np.sinc``.
    """
    x = np.asarray(t_g, dtype=float) * (np.asarray(omega_L, dtype=float) + np.asarray(A, dtype=float))
    xf = x - np.round(x)
    mag = np.sinc(F * xf) / np.sinc(xf)
    g = np.exp(1j * np.pi * (F - 1) * xf) * mag
    return g, np.abs(g)


def filter_direct(F: int, t_g, A, omega_L):
    """Explicit summation of the grating phases (oracle for ``filter_value``)."""
    x = np.asarray(t_g, dtype=float) * (omega_L + np.asarray(A, dtype=float))
    k = np.arange(F).reshape((-1,) + (1,) * np.ndim(x))
    # k is an integer, so dropping whole turns of x keeps every phase exact
    return np.mean(np.exp(2j * np.pi * k * (x - np.round(x))), axis=0)


def filtered_hamiltonian_couplings(system, filt: FilterParams, gradient_scale: float = 1.0) -> np.ndarray:
    """Effective transverse coupling ``B |G|`` of every spin (Hz)."""
    _, mag = filter_value(filt.F, filt.t_g, gradient_scale * system.a, system.larmor)
    return system.b * mag


def linewidth_bandwidth(filt: FilterParams):
    """(linewidth, bandwidth) = (1/(F t_g), 1/t_g) in Hz."""
    if filt.t_g <= 0:
        raise ValueError("t_g must be positive")
    return 1.0 / (filt.F * filt.t_g), 1.0 / filt.t_g


def first_filter_zero(F: int, t_g: float) -> float:
    return 1.0 / (F * t_g)


# -- multi-spin composition -------------------------------------------------

def spin_transfers(system, Omega, t, F=1, t_g=0.0, scales: CouplingScales = CouplingScales()):
    """Per-spin transfer fractions for one filtered spin-lock run.

    Returns an array of shape ``(n_spins,) + broadcast(Omega, t_g)``.
    """
    Omega = np.asarray(Omega, dtype=float)
    t_g = np.asarray(t_g, dtype=float)
    shape = np.broadcast(Omega, t_g).shape
    out = np.empty((system.n_spins,) + shape)
    for j in range(system.n_spins):
        a, b, wl = system.a[j], system.b[j], system.larmor[j]
        if F > 1 and np.any(t_g > 0):
            _, g = filter_value(F, t_g, scales.gradient * a, wl)
        else:
            g = 1.0
        eff_b = scales.rate * b * g
        out[j] = transfer_fraction(Omega, scales.lock * a, eff_b, wl, t)
    return out


def cp_signal(system, Omega, t, F=1, t_g=0.0, scales: CouplingScales = CouplingScales()):
    """Independent-spin signal ``(1 + prod_j (1 - x_j))/2`` for a forward run."""
    x = spin_transfers(system, Omega, t, F, t_g, scales)
    return 0.5 * (1 + np.prod(1 - x, axis=0)) if system.n_spins else np.ones(np.broadcast(Omega, t_g).shape)


def hopping_matrix(d_matrix, t_d: float) -> np.ndarray:
    """Single-excitation polarisation transfer probabilities after ``t_d``.

    Exact for an isolated pair; for larger networks it treats the flip-flop
    network in the one-excitation manifold.
    """
    d = np.asarray(d_matrix, dtype=float)
    if d.size == 0 or t_d == 0:
        return np.eye(len(d))
    h = -0.5 * d
    w, v = np.linalg.eigh(h)
    u = (v * np.exp(-2j * np.pi * w * t_d)) @ v.conj().T
    return np.abs(u) ** 2


def twod_signal(system, Omega_p, t_g_p, Omega_q, t_g_q, t, F, t_d, scales: CouplingScales = CouplingScales()):
    """Correlation signal ``S(p, q)``: polarise at p, diffuse, reverse-sense at q.

    ``Omega_p``/``t_g_p`` index rows and ``Omega_q``/``t_g_q`` columns. Each
    spin returns the fraction ``x_q pol`` of its polarisation to the NV; the
    returns combine as ``1 - prod(1 - x_q pol)`` so that several matched spins
    cannot push the NV past full polarisation. For one matched spin this is
    the isolated-pair law.
    """
    n = system.n_spins
    xp = spin_transfers(system, Omega_p, t, F, t_g_p, scales).reshape(n, -1)  # (n, P)
    xq = spin_transfers(system, Omega_q, t, F, t_g_q, scales).reshape(n, -1)  # (n, Q)
    m = hopping_matrix(system.d_matrix, t_d)
    pol = m @ xp
    if system.n_spins == 0:
        return np.full((pol.shape[1], xq.shape[1]), 0.5)
    keep = np.prod(1 - xq[:, None, :] * pol[:, :, None], axis=0)  # (P, Q)
    return 0.5 * (2 - keep)


def twod_peaks(p: TwoDPeakParams):
    """Diagonal and cross-peak intensities for an isolated pair."""
    si = np.sin(np.pi * p.b_i * p.t) ** 2
    sj = np.sin(np.pi * p.b_j * p.t) ** 2
    c = np.pi * p.d_ij * p.t_d
    s_ii = 0.5 * (1 + si ** 2 * np.cos(c) ** 2)
    s_ij = 0.5 * (1 + si * sj * np.sin(c) ** 2)
    return float(s_ii), float(s_ij)


# -- WAHUHA ------------------------------------------------------------------

@dataclass(frozen=True)
class WahuhaEffective:
    resonance: np.ndarray  # Omega at which the spin is matched, Hz
    rate: np.ndarray       # effective transverse coupling, Hz
    b_m: np.ndarray
    c_m: np.ndarray


def wahuha_effective(a, b, phi=0.0, omega_L: float = 2e6) -> WahuhaEffective:
    """First-order WAHUHA model: resonance ``omega_L + A/(2 sqrt3)`` and rate
    ``B (2 + sqrt3)/(3 sqrt3)``.

    ``b_m`` and ``c_m`` are the [111]-frame components in the published
    closed form. Their quadrature sum equals ``rate`` only at ``phi = 0``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    phi = np.asarray(phi, dtype=float)
    r3 = np.sqrt(3.0)
    den = 3 * np.sqrt(2.0) * (r3 - 3)
    b_m = b * ((2 + r3) * np.sin(phi) + np.cos(phi)) / den
    c_m = b * (2 + r3) * (np.cos(phi) - np.sin(phi)) / den
    return WahuhaEffective(resonance=omega_L + a / (2 * r3), rate=b * WAHUHA_RATE_SCALE, b_m=b_m, c_m=c_m)
