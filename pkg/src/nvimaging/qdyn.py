"""Exact evolution of the NV + nuclear spin register.

Conventions
-----------
* Qubit order is NV first, then the nuclear spins in system order. Basis
  index 0 of every qubit is spin-up (m = +1/2).
* During cross-polarisation the NV is written in the dressed basis of the
  spin-lock: S_z' is the lab S_x of the driven two-level transition. The lab
  state |0> is (|up'> + |down'>)/sqrt2, and the opening pi/2 pulse takes it to
  |up'>.
* Simulations run in a frame rotating at ``frame`` Hz about
  K = S_z' + sum_j I_z^j. ``frame = 0`` is the bare dressed-state frame;
  the default ``frame = omega_L`` removes the nuclear Larmor precession and is
  the frame in which WAHUHA pulses are defined. ``QuantumState.clock`` tracks
  elapsed time so frame-dependent operators can be mapped back.
* A mixed state is a weighted ensemble of pure columns.
* Hamiltonians are returned in rad/s; inputs are in Hz.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .analytic import DEFAULT_MEMORY_T2, filter_value

MAX_SPINS = 14
EXACT_MIXED_MAX_SPINS = 6
DEFAULT_SAMPLES = 64
BLOCK_MIN_DIM = 512
TWO_PI = 2 * np.pi


class ProtocolError(RuntimeError):
    """Sequence-ordering or memory misuse."""


class HilbertSpaceError(ValueError):
    """Register too large for the dense engine."""


# -- operators -----------------------------------------------------------------

_PAULI = {
    "x": np.array([[0, 0.5], [0.5, 0]], dtype=complex),
    "y": np.array([[0, -0.5j], [0.5j, 0]], dtype=complex),
    "z": np.array([[0.5, 0], [0, -0.5]], dtype=complex),
    "+": np.array([[0, 1], [0, 0]], dtype=complex),
    "-": np.array([[0, 0], [1, 0]], dtype=complex),
}


class OperatorAlgebra:
    """Spin operators on the ``2 * 2**n_spins`` dimensional register.

    Operators are scipy sparse CSR matrices built once and cached.
    """

    def __init__(self, n_spins: int, nv_levels: int = 2, allow_large: bool = False):
        if nv_levels != 2:
            raise ValueError("only the two-level NV model is implemented")
        if n_spins < 0:
            raise ValueError("n_spins must be non-negative")
        if n_spins > MAX_SPINS and not allow_large:
            raise HilbertSpaceError(f"{n_spins} spins exceeds the {MAX_SPINS}-spin cap (allow_large overrides)")
        self.n_spins = n_spins
        self.nv_levels = nv_levels
        self.n_qubits = n_spins + 1
        self.dim = 2 ** self.n_qubits
        self._cache = {}
        idx = np.arange(self.dim)
        # m_z of each qubit for every basis state, shape (n_qubits, dim)
        self.mz = np.array([0.5 - ((idx >> (self.n_qubits - 1 - q)) & 1) for q in range(self.n_qubits)])
        self.excitation = self.mz.sum(axis=0)
        self._self_check()

    def _embed(self, q: int, comp: str):
        key = (q, comp)
        if key not in self._cache:
            left = sp.identity(2 ** q, dtype=complex, format="csr")
            right = sp.identity(2 ** (self.n_qubits - q - 1), dtype=complex, format="csr")
            self._cache[key] = sp.kron(sp.kron(left, sp.csr_matrix(_PAULI[comp])), right, format="csr")
        return self._cache[key]

    def nv(self, comp: str):
        """NV operator ``S_comp`` for comp in x, y, z, +, -."""
        return self._embed(0, comp)

    def spin(self, j: int, comp: str):
        if not 0 <= j < self.n_spins:
            raise IndexError(f"spin index {j} out of range")
        return self._embed(j + 1, comp)

    def identity(self):
        return sp.identity(self.dim, dtype=complex, format="csr")

    def total_iz(self):
        return sp.diags(self.mz[1:].sum(axis=0).astype(complex), format="csr")

    def _self_check(self):
        for comp in "xyz":
            op = self.nv(comp)
            if abs(op - op.conj().T).max() > 1e-14:
                raise AssertionError("non-Hermitian elementary operator")
        if self.n_spins >= 2:
            c = self.spin(0, "x") @ self.spin(1, "y") - self.spin(1, "y") @ self.spin(0, "x")
            if c.count_nonzero() and abs(c).max() > 1e-14:
                raise AssertionError("operators on distinct spins do not commute")

    def basis_labels(self) -> list:
        labels = []
        for i in range(self.dim):
            bits = format(i, f"0{self.n_qubits}b")
            labels.append(bits[0].replace("0", "u").replace("1", "d") + "|"
                          + bits[1:].replace("0", "u").replace("1", "d"))
        return labels


# -- Hamiltonians ----------------------------------------------------------------

HAMILTONIAN_KINDS = ("spin_lock", "gradient", "homonuclear", "free_larmor")


@dataclass(frozen=True)
class HamiltonianTerm:
    """One Hamiltonian contribution; ``params`` holds Hz-valued arrays.

    spin_lock: Omega, larmor, a, b, phi, lock_shift (1.0), frame (0.0),
    coupling_factor (complex per spin, default 1).
    gradient: larmor, a, frame.
    homonuclear: d_matrix, species (optional; cross-species pairs keep only zz).
    free_larmor: larmor, frame.
    """

    kind: str
    params: dict

    def __post_init__(self):
        if self.kind not in HAMILTONIAN_KINDS:
            raise ValueError(f"unknown Hamiltonian kind {self.kind!r}")


def _spin_arrays(params, n):
    out = {}
    for key in ("larmor", "a", "b", "phi"):
        if key in params:
            v = np.atleast_1d(np.asarray(params[key], dtype=float))
            if v.shape != (n,):
                raise ValueError(f"{key} has {v.size} entries for {n} spins")
            out[key] = v
    return out


def build_hamiltonian(term: HamiltonianTerm, algebra: OperatorAlgebra):
    """Sparse Hermitian matrix (rad/s) for ``term``.

    spin_lock: (Omega - f) S_z + sum_j (wL_j - f + s A_j) I_z^j
    + (B_j/2)(c_j e^{i phi_j} S_+ I_-^j + h.c.), with f the frame frequency
    and s the lock shift.
    gradient: sum_j (wL_j + A_j - f) I_z^j - f S_z (NV frozen).
    homonuclear: sum_{i<j} D_ij (2 I_z I_z - (I_+ I_- + I_- I_+)/2).
    free_larmor: sum_j (wL_j - f) I_z^j - f S_z.
    """
    n = algebra.n_spins
    p = term.params
    f = float(p.get("frame", 0.0))
    arr = _spin_arrays(p, n)
    mz = algebra.mz
    if term.kind == "spin_lock":
        for key in ("larmor", "a", "b"):
            if key not in arr:
                raise ValueError(f"spin_lock needs {key}")
        phi = arr.get("phi", np.zeros(n))
        shift = float(p.get("lock_shift", 1.0))
        diag = (float(p["Omega"]) - f) * mz[0]
        for j in range(n):
            diag = diag + (arr["larmor"][j] - f + shift * arr["a"][j]) * mz[j + 1]
        h = sp.diags(diag.astype(complex), format="csr")
        factor = np.broadcast_to(np.asarray(p.get("coupling_factor", 1.0), dtype=complex), (n,))
        sp_nv = algebra.nv("+")
        for j in range(n):
            c = 0.5 * arr["b"][j] * factor[j] * np.exp(1j * phi[j])
            if c != 0:
                ff = c * (sp_nv @ algebra.spin(j, "-"))
                h = h + ff + ff.conj().T
    elif term.kind in ("gradient", "free_larmor"):
        if "larmor" not in arr:
            raise ValueError(f"{term.kind} needs larmor")
        a = arr.get("a", np.zeros(n)) if term.kind == "gradient" else np.zeros(n)
        if term.kind == "gradient" and "a" not in arr:
            raise ValueError("gradient needs a")
        diag = -f * mz[0]
        for j in range(n):
            diag = diag + (arr["larmor"][j] + a[j] - f) * mz[j + 1]
        h = sp.diags(diag.astype(complex), format="csr")
    else:
        d = np.asarray(p["d_matrix"], dtype=float)
        if d.shape != (n, n):
            raise ValueError(f"d_matrix shape {d.shape} for {n} spins")
        species = p.get("species") or ["x"] * n
        diag = np.zeros(algebra.dim)
        h = sp.csr_matrix((algebra.dim, algebra.dim), dtype=complex)
        for i in range(n):
            for j in range(i + 1, n):
                if d[i, j] == 0:
                    continue
                diag = diag + 2 * d[i, j] * mz[i + 1] * mz[j + 1]
                if species[i] == species[j]:
                    ff = -0.5 * d[i, j] * (algebra.spin(i, "+") @ algebra.spin(j, "-"))
                    h = h + ff + ff.conj().T
        h = h + sp.diags(diag.astype(complex), format="csr")
    return (TWO_PI * h).tocsr()


def spin_lock_term(system, Omega, frame=0.0, lock_shift=1.0, coupling_factor=1.0) -> HamiltonianTerm:
    return HamiltonianTerm("spin_lock", dict(Omega=Omega, larmor=system.larmor, a=system.a, b=system.b,
                                             phi=system.phi, frame=frame, lock_shift=lock_shift,
                                             coupling_factor=coupling_factor))


def gradient_term(system, frame=0.0) -> HamiltonianTerm:
    return HamiltonianTerm("gradient", dict(larmor=system.larmor, a=system.a, frame=frame))


def homonuclear_term(system) -> HamiltonianTerm:
    return HamiltonianTerm("homonuclear", dict(d_matrix=system.d_matrix, species=system.species))


def free_term(system, frame=0.0) -> HamiltonianTerm:
    return HamiltonianTerm("free_larmor", dict(larmor=system.larmor, frame=frame))


# -- exponentials ------------------------------------------------------------------

def _check_hermitian(h, tol=1e-12):
    if sp.issparse(h):
        diff = abs(h - h.conj().T).max() if h.nnz else 0.0
        norm = abs(h).max() if h.nnz else 0.0
    else:
        diff = np.abs(h - h.conj().T).max() if h.size else 0.0
        norm = np.abs(h).max() if h.size else 0.0
    if diff > tol * max(norm, 1.0):
        raise ValueError(f"Hamiltonian is not Hermitian (deviation {diff:.3g})")


class Evolution:
    """Eigendecomposition of one Hamiltonian, reused for many durations.

    When ``blocks`` is given (a label per basis state) and the Hamiltonian
    does not connect different labels, each block is diagonalised separately.
    """

    def __init__(self, h, blocks: Optional[np.ndarray] = None):
        _check_hermitian(h)
        self.dim = h.shape[0]
        self.parts = None
        if blocks is not None and sp.issparse(h):
            coo = h.tocoo()
            if np.all(blocks[coo.row] == blocks[coo.col]):
                self.parts = [np.flatnonzero(blocks == v) for v in np.unique(blocks)]
        hd = h
        if self.parts is None:
            hd = h.toarray() if sp.issparse(h) else np.asarray(h)
            self.eig = [np.linalg.eigh(hd)]
        else:
            hc = h.tocsr()
            self.eig = [np.linalg.eigh(hc[idx][:, idx].toarray()) for idx in self.parts]

    def unitary(self, t: float):
        if t < 0:
            raise ValueError("duration must be non-negative")
        mats = [(v * np.exp(-1j * w * t)) @ v.conj().T for w, v in self.eig]
        if self.parts is None:
            return mats[0]
        return BlockOperator(self.parts, mats)


class BlockOperator:
    """Block-diagonal operator on a fixed index partition."""

    def __init__(self, parts, mats):
        self.parts = parts
        self.mats = mats

    def __matmul__(self, other):
        if isinstance(other, BlockOperator):
            return BlockOperator(self.parts, [a @ b for a, b in zip(self.mats, other.mats)])
        return NotImplemented

    def power(self, n: int):
        return BlockOperator(self.parts, [np.linalg.matrix_power(m, n) for m in self.mats])

    def apply(self, psi):
        out = np.empty_like(psi)
        for idx, m in zip(self.parts, self.mats):
            out[idx] = m @ psi[idx]
        return out

    def dense(self):
        dim = sum(len(p) for p in self.parts)
        u = np.zeros((dim, dim), dtype=complex)
        for idx, m in zip(self.parts, self.mats):
            u[np.ix_(idx, idx)] = m
        return u


def op_power(u, n: int):
    return u.power(n) if isinstance(u, BlockOperator) else np.linalg.matrix_power(u, n)


def op_apply(u, psi):
    return u.apply(psi) if isinstance(u, BlockOperator) else u @ psi


def op_mul(a, b):
    """``a @ b`` for dense or block operators; mixing densifies."""
    if isinstance(a, BlockOperator) and isinstance(b, BlockOperator):
        return a @ b
    a = a.dense() if isinstance(a, BlockOperator) else a
    b = b.dense() if isinstance(b, BlockOperator) else b
    return a @ b


def unitary(h, t: float) -> np.ndarray:
    """Dense ``exp(-i h t)`` by eigendecomposition."""
    u = Evolution(h).unitary(t)
    return u


# -- states ------------------------------------------------------------------------

@dataclass
class QuantumState:
    """Weighted ensemble of pure states over the register.

    ``psi`` has shape (dim, K) and ``weights`` shape (K,), summing to one.
    The stored-memory flag marks gradient intervals during which the NV
    coherence sits in the ancilla; the register columns still carry it, and
    no NV Hamiltonian acts on it in the bare frame.
    """

    psi: np.ndarray
    weights: np.ndarray
    n_spins: int
    clock: float = 0.0
    frame: float = 0.0
    memory_stored: bool = False
    memory_time: float = 0.0
    memory_time_dephased: float = 0.0
    nv_basis: str = "dressed"

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=complex).reshape(2 ** (self.n_spins + 1), -1)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.psi.shape[1] != self.weights.size:
            raise ValueError("column count differs from weight count")

    @property
    def dim(self) -> int:
        return self.psi.shape[0]

    @property
    def amplitudes(self) -> np.ndarray:
        """State vector of a pure state."""
        if self.psi.shape[1] != 1:
            raise ValueError("state is a mixture; use density_matrix()")
        return self.psi[:, 0]

    @property
    def elapsed_memory_time(self) -> float:
        return self.memory_time

    @property
    def memory_register(self) -> Optional[np.ndarray]:
        """Reduced NV density matrix while stored, else ``None``."""
        return self.nv_density() if self.memory_stored else None

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.psi, axis=0)

    def trace(self) -> float:
        return float(self.weights @ self.norms() ** 2)

    def density_matrix(self) -> np.ndarray:
        return (self.psi * self.weights) @ self.psi.conj().T

    def nv_density(self) -> np.ndarray:
        half = self.dim // 2
        up, dn = self.psi[:half], self.psi[half:]
        w = self.weights
        return np.array([[np.sum(w * np.einsum("ij,ij->j", up.conj(), up)),
                          np.sum(w * np.einsum("ij,ij->j", dn.conj(), up))],
                         [np.sum(w * np.einsum("ij,ij->j", up.conj(), dn)),
                          np.sum(w * np.einsum("ij,ij->j", dn.conj(), dn))]])

    def copy(self) -> "QuantumState":
        return replace(self, psi=self.psi.copy(), weights=self.weights.copy())


def _nuclear_columns(n_spins: int, samples: Optional[int], seed: int):
    """Columns (2**n, K) and weights of the maximally mixed nuclear state."""
    d = 2 ** n_spins
    if n_spins <= EXACT_MIXED_MAX_SPINS and samples is None:
        return np.eye(d, dtype=complex), np.full(d, 1.0 / d)
    k = samples or DEFAULT_SAMPLES
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, d, size=k)
    cols = np.zeros((d, k), dtype=complex)
    cols[idx, np.arange(k)] = 1.0
    return cols, np.full(k, 1.0 / k)


NV_STATES = {
    "up": np.array([1.0, 0.0], dtype=complex),            # dressed |up'> (after the opening pi/2)
    "lab0": np.array([1.0, 1.0], dtype=complex) / np.sqrt(2),  # lab |0> in the dressed basis
}


def _tensor_nv(nv_cols, nv_w, nuc_cols, nuc_w):
    cols, ws = [], []
    for a, wa in zip(nv_cols, nv_w):
        cols.append(np.kron(a.reshape(2, 1), nuc_cols))
        ws.append(wa * nuc_w)
    return np.hstack(cols), np.concatenate(ws)


def _nv_preparation(kind: str):
    if kind == "mixed":
        return [np.array([1, 0], complex), np.array([0, 1], complex)], np.array([0.5, 0.5])
    if kind in NV_STATES:
        return [NV_STATES[kind]], np.array([1.0])
    raise ValueError(f"unknown NV preparation {kind!r}")


def initial_state(n_spins: int, nv: str = "up", samples: Optional[int] = None, seed: int = 0,
                  frame: float = 0.0, nuclear: Optional[np.ndarray] = None) -> QuantumState:
    """NV in ``nv`` (up | lab0 | mixed) times a nuclear state.

    ``nuclear`` may be a pure nuclear vector; by default the nuclear register
    is maximally mixed (all basis states for up to 6 spins, else ``samples``
    random basis states drawn with ``seed``).
    """
    if nuclear is None:
        nuc, nw = _nuclear_columns(n_spins, samples, seed)
    else:
        nuc = np.asarray(nuclear, dtype=complex).reshape(2 ** n_spins, 1)
        nuc = nuc / np.linalg.norm(nuc)
        nw = np.array([1.0])
    nv_cols, nv_w = _nv_preparation(nv)
    psi, w = _tensor_nv(nv_cols, nv_w, nuc, nw)
    return QuantumState(psi=psi, weights=w, n_spins=n_spins, frame=frame)


def nuclear_reduced(state: QuantumState):
    """Nuclear columns and weights after tracing out the NV."""
    half = state.dim // 2
    cols = np.hstack([state.psi[:half], state.psi[half:]])
    w = np.concatenate([state.weights, state.weights])
    norms = np.linalg.norm(cols, axis=0)
    keep = norms > 1e-14
    cols = cols[:, keep] / norms[keep]
    w = w[keep] * norms[keep] ** 2
    return _compress(cols, w, half)


def _compress(cols, w, dim):
    if cols.shape[1] <= dim:
        return cols, w
    rho = (cols * w) @ cols.conj().T
    lam, vec = np.linalg.eigh(rho)
    keep = lam > 1e-14 * max(lam.max(), 1e-300)
    return vec[:, keep], lam[keep]


def reset_nv(state: QuantumState, nv: str = "up") -> QuantumState:
    """Re-polarise the NV (optical reset) keeping the nuclear reduced state."""
    if state.memory_stored:
        raise ProtocolError("NV reset while the memory holds the NV state")
    nuc, nw = nuclear_reduced(state)
    nv_cols, nv_w = _nv_preparation(nv)
    psi, w = _tensor_nv(nv_cols, nv_w, nuc, nw)
    return replace(state, psi=psi, weights=w, memory_time=0.0, memory_time_dephased=0.0, nv_basis="dressed")


# -- state operations -------------------------------------------------------------------

def propagate(state: QuantumState, hamiltonian, duration: float) -> QuantumState:
    """Apply ``exp(-i H duration)``; ``H`` in rad/s (dense or sparse)."""
    if duration < 0:
        raise ValueError("duration must be non-negative")
    out = state.copy()
    if duration > 0:
        out.psi = op_apply(Evolution(hamiltonian).unitary(duration), state.psi)
    return _advance(out, duration)


def apply_unitary(state: QuantumState, u, duration: float = 0.0) -> QuantumState:
    out = state.copy()
    out.psi = op_apply(u, state.psi)
    return _advance(out, duration)


def _advance(state: QuantumState, duration: float) -> QuantumState:
    state.clock += duration
    if state.memory_stored:
        state.memory_time += duration
    return state


def rotation_matrix(axis: str, angle: float) -> np.ndarray:
    """2x2 ``exp(-i angle sigma_axis / 2)``; axis may carry a sign (``-y``)."""
    sign = -1.0 if axis.startswith("-") else 1.0
    comp = axis.lstrip("+-")
    if comp not in ("x", "y", "z"):
        raise ValueError(f"unknown rotation axis {axis!r}")
    op = 2 * _PAULI[comp]
    th = sign * angle / 2
    return np.cos(th) * np.eye(2) - 1j * np.sin(th) * op


def pulse_operator(n_spins: int, axis: str, angle: float, target) -> np.ndarray:
    """Dense unitary of an ideal rotation on the addressed qubits.

    ``target`` is ``"nv"``, ``"nuclei"`` (all spins) or a sequence of spin
    indices.
    """
    r = rotation_matrix(axis, angle)
    if isinstance(target, str):
        if target == "nv":
            qubits = {0}
        elif target == "nuclei":
            qubits = set(range(1, n_spins + 1))
        else:
            raise ValueError(f"unknown pulse target {target!r}")
    else:
        idx = list(target)
        if any(not 0 <= j < n_spins for j in idx):
            raise ValueError(f"pulse target {idx} outside the register")
        qubits = {j + 1 for j in idx}
    u = np.ones((1, 1), dtype=complex)
    for q in range(n_spins + 1):
        u = np.kron(u, r if q in qubits else np.eye(2))
    return u


def apply_pulse(state: QuantumState, axis: str, angle: float, target="nv") -> QuantumState:
    """Instantaneous ideal rotation."""
    if not np.isfinite(angle):
        raise ValueError("pulse angle must be finite")
    return apply_unitary(state, pulse_operator(state.n_spins, axis, angle, target))


def swap_to_memory(state: QuantumState) -> QuantumState:
    """Store the NV state in the ancilla (ideal, instantaneous)."""
    if state.memory_stored:
        raise ProtocolError("memory already holds a state")
    out = state.copy()
    out.memory_stored = True
    return out


def lab_z_operator(clock: float, frame: float) -> np.ndarray:
    """Lab-basis Pauli Z of the NV written in the dressed basis of the
    simulation frame at time ``clock``."""
    th = TWO_PI * frame * clock
    sx = np.array([[0, 1], [1, 0]], dtype=complex)
    sy = np.array([[0, -1j], [1j, 0]], dtype=complex)
    return np.cos(th) * sx - np.sin(th) * sy


def memory_coherence(stored_time: float, t2: Optional[float], decay: str = "gaussian",
                     since: float = 0.0) -> float:
    """Coherence factor accumulated between ``since`` and ``stored_time``."""
    if t2 is None or stored_time <= since:
        return 1.0
    if decay == "gaussian":
        return float(np.exp(-(stored_time ** 2 - since ** 2) / t2 ** 2))
    if decay == "exponential":
        return float(np.exp(-(stored_time - since) / t2))
    raise ValueError(f"unknown memory decay {decay!r}")


def swap_from_memory(state: QuantumState, t2: Optional[float] = None, decay: str = "gaussian") -> QuantumState:
    """Restore the NV; with ``t2`` set, apply lab-basis phase damping for the
    stored time accumulated since the last restore."""
    if not state.memory_stored:
        raise ProtocolError("restore from an empty memory")
    out = state.copy()
    out.memory_stored = False
    lam = memory_coherence(out.memory_time, t2, decay, out.memory_time_dephased)
    out.memory_time_dephased = out.memory_time
    if lam < 1.0:
        z = np.kron(lab_z_operator(out.clock, out.frame), np.eye(out.dim // 2))
        psi = np.hstack([out.psi, z @ out.psi])
        w = np.concatenate([out.weights * (1 + lam) / 2, out.weights * (1 - lam) / 2])
        out.psi, out.weights = _compress(psi, w, out.dim)
    return out


def measure_nv(state: QuantumState) -> float:
    """Normalised signal: population of NV basis state 0.

    In the dressed basis this is ``1/2 + <S_z'>`` (the spin-lock projection
    read out through the closing pi/2); after an explicit closing pulse in the
    lab basis it is the |0> population.
    """
    if state.memory_stored:
        raise ProtocolError("cannot read out while the memory holds the NV state")
    half = state.dim // 2
    return float(state.weights @ np.sum(np.abs(state.psi[:half]) ** 2, axis=0))


def nuclear_polarizations(state: QuantumState) -> np.ndarray:
    """``<I_z^j>`` for every spin."""
    pops = np.abs(state.psi) ** 2 @ state.weights
    n = state.n_spins
    idx = np.arange(state.dim)
    return np.array([pops @ (0.5 - ((idx >> (n - 1 - j)) & 1)) for j in range(n)])


def state_to_json(state: QuantumState, threshold: float = 0.0) -> str:
    """Readable dump: basis labels (NV|nuclei, u = up, d = down) and amplitudes."""
    labels = OperatorAlgebra(state.n_spins, allow_large=True).basis_labels() if state.n_spins <= 10 else None
    cols = []
    for k in range(state.psi.shape[1]):
        amps = []
        for i, a in enumerate(state.psi[:, k]):
            if abs(a) > threshold:
                amps.append([labels[i] if labels else i, [float(a.real), float(a.imag)]])
        cols.append({"weight": float(state.weights[k]), "amplitudes": amps})
    return json.dumps({"n_spins": state.n_spins, "clock_s": state.clock, "frame_hz": state.frame,
                       "memory_stored": state.memory_stored, "memory_time_s": state.memory_time,
                       "nv_basis": state.nv_basis, "columns": cols}, indent=1)


# -- WAHUHA ------------------------------------------------------------------------------

WAHUHA_PULSES = ("x", "-y", "y", "-x")
WAHUHA_DELAYS = (1, 1, 2, 1, 1)


def wahuha_cycle(evo: Evolution, n_spins: int, cycle: float, pulses=None) -> np.ndarray:
    """Unitary of one cycle tau X tau -Y 2tau Y tau -X tau (6 tau = ``cycle``)
    with ideal pi/2 pulses on every nucleus."""
    tau = cycle / 6
    pulses = pulses or [pulse_operator(n_spins, ax, np.pi / 2, "nuclei") for ax in WAHUHA_PULSES]
    u1 = _dense(evo.unitary(tau))
    u2 = u1 @ u1
    delays = {1: u1, 2: u2}
    u = delays[WAHUHA_DELAYS[0]]
    for p, d in zip(pulses, WAHUHA_DELAYS[1:]):
        u = delays[d] @ p @ u
    return u


def _dense(u):
    return u.dense() if isinstance(u, BlockOperator) else u


def wahuha_segment(evo: Evolution, n_spins: int, duration: float, max_cycle: float, pulses=None):
    """Whole number of WAHUHA cycles filling ``duration``, each at most ``max_cycle`` long."""
    if duration <= 0:
        return np.eye(evo.dim, dtype=complex)
    n_c = max(1, math.ceil(duration / max_cycle - 1e-9))
    return np.linalg.matrix_power(wahuha_cycle(evo, n_spins, duration / n_c, pulses), n_c)


# -- sequences ---------------------------------------------------------------------------

def _protocol_get(protocol, name, default=None):
    return getattr(protocol, name, default)


def segment_hamiltonians(system, protocol, frame: float, algebra: OperatorAlgebra):
    """(spin-lock, gradient, diffusion) Hamiltonians in rad/s for ``protocol``."""
    dec = _protocol_get(protocol, "decoupling", "none")
    lock_shift = _protocol_get(protocol, "lock_shift", None)
    if lock_shift is None:
        lock_shift = 0.5 if dec == "wahuha" else 1.0
    keep_d = dec == "none" or dec == "wahuha"
    h_sl = build_hamiltonian(spin_lock_term(system, protocol.rabi, frame, lock_shift), algebra)
    h_g = build_hamiltonian(gradient_term(system, frame), algebra)
    h_d = build_hamiltonian(homonuclear_term(system), algebra) if system.n_spins > 1 else None
    if keep_d and h_d is not None and np.any(system.d_matrix):
        h_sl = h_sl + h_d
        h_g = h_g + h_d
    h_free = build_hamiltonian(free_term(system, frame), algebra)
    h_diff = h_free + h_d if h_d is not None else h_free
    return h_sl, h_g, h_diff


def _segment_unitary(h, duration, n_spins, wahuha_cycle_time, blocks, pulses):
    if duration <= 0:
        return None
    if wahuha_cycle_time:
        return wahuha_segment(Evolution(h), n_spins, duration, wahuha_cycle_time, pulses)
    return Evolution(h, blocks).unitary(duration)


def run_sequence(system, protocol, initial: Optional[QuantumState] = None, *, frame: Optional[float] = None,
                 samples: Optional[int] = None, seed: int = 0, allow_large: bool = False) -> QuantumState:
    """Execute one protocol run and return the final state (memory empty).

    Steps: NV reset (the opening pi/2 unless omitted for reverse sensing),
    F repetitions of [spin-lock t/F, store, gradient t_g, restore], optional
    embedded WAHUHA, then optional free diffusion for ``t_d``. ``dd_sense``
    protocols are delegated to :func:`run_cpmg`.
    """
    kind = protocol.kind
    if kind == "dd_sense":
        return run_cpmg(system, protocol.tau, protocol.n_pairs, initial=initial, samples=samples, seed=seed)
    n = system.n_spins
    algebra = OperatorAlgebra(n, allow_large=allow_large)
    if frame is None:
        frame = system.omega_L if n else 0.0
    dec = _protocol_get(protocol, "decoupling", "none")
    if dec == "wahuha" and abs(frame - (system.omega_L if n else 0.0)) > 1e-6 * max(frame, 1.0):
        raise ProtocolError("WAHUHA pulses are defined in the frame rotating at omega_L")
    nv_prep = "up" if protocol.include_initial_pi2 else "mixed"
    if initial is None:
        state = initial_state(n, nv_prep, samples=samples, seed=seed, frame=frame)
    else:
        if initial.n_spins != n:
            raise ValueError("initial state size differs from the system")
        if abs(initial.frame - frame) > 1e-9 * max(abs(frame), 1.0):
            raise ValueError("initial state was produced in a different frame")
        state = reset_nv(initial, nv_prep)

    filt = _protocol_get(protocol, "filter", None)
    F = filt.F if filt is not None else 1
    t_g = filt.t_g if filt is not None else 0.0
    t = protocol.contact_time
    h_sl, h_g, h_diff = segment_hamiltonians(system, protocol, frame, algebra)
    cycle = _protocol_get(protocol, "wahuha_cycle", None) if dec == "wahuha" else None
    pulses = [pulse_operator(n, ax, np.pi / 2, "nuclei") for ax in WAHUHA_PULSES] if cycle else None
    blocks = algebra.excitation if (algebra.dim >= BLOCK_MIN_DIM and not cycle) else None
    c_sl = cycle if _protocol_get(protocol, "decouple_spinlock", True) else None
    c_g = cycle if _protocol_get(protocol, "decouple_gradient", True) else None
    u_sl = _segment_unitary(h_sl, t / F, n, c_sl, blocks, pulses)
    u_g = _segment_unitary(h_g, t_g, n, c_g, blocks, pulses)
    t2 = _protocol_get(protocol, "memory_t2", None)
    decay = _protocol_get(protocol, "memory_decay", "gaussian")

    if t_g > 0 and t2 is not None:
        for _ in range(F):
            state = apply_unitary(state, u_sl, t / F)
            state = swap_to_memory(state)
            state = apply_unitary(state, u_g, t_g)
            state = swap_from_memory(state, t2, decay)
    else:
        rep = u_sl if t_g <= 0 else op_mul(u_g, u_sl)
        state = apply_unitary(state, op_power(rep, F), 0.0)
        state.clock += t + F * t_g
        state.memory_time += F * t_g
        state.memory_time_dephased = state.memory_time
    t_d = _protocol_get(protocol, "t_d", 0.0) or 0.0
    if t_d > 0:
        state = apply_unitary(state, Evolution(h_diff, algebra.excitation if algebra.dim >= BLOCK_MIN_DIM else None)
                              .unitary(t_d), t_d)
    return state


def filtered_hamiltonian(system, Omega: float, F: int, t_g: float, frame: float, lock_shift: float = 1.0,
                         algebra: Optional[OperatorAlgebra] = None):
    """Spin-lock Hamiltonian with every flip-flop weighted by the grating sum.

    In this engine's convention the toggling-frame average carries the complex
    conjugate of the grating sum on the ``S_+ I_-`` term.
    """
    algebra = algebra or OperatorAlgebra(system.n_spins)
    g, _ = filter_value(F, t_g, system.a, system.larmor)
    return build_hamiltonian(spin_lock_term(system, Omega, frame, lock_shift, np.conj(g)), algebra)


# -- dynamical decoupling ------------------------------------------------------------

def run_cpmg(system, tau: float, n_pairs: int, initial: Optional[QuantumState] = None,
             samples: Optional[int] = None, seed: int = 0) -> QuantumState:
    """Explicit pulse train in the lab NV basis (|0> = index 0, |-1> = index 1).

    H = omega_L sum I_z + |1><1| (x) sum_j (A_j I_z + B_j I_perp), sequence
    pi/2_x, tau/2, [pi_x, tau, ...] (2n pulses), tau/2, -pi/2_x; the
    returned state is read out with :func:`measure_nv`.
    """
    n = system.n_spins
    algebra = OperatorAlgebra(n)
    p1 = sp.diags((0.5 - algebra.mz[0]).astype(complex))  # projector on NV index 1
    h = sp.csr_matrix((algebra.dim, algebra.dim), dtype=complex)
    for j in range(n):
        h = h + system.larmor[j] * algebra.spin(j, "z")
        hj = system.a[j] * algebra.spin(j, "z") + system.b[j] * (
            np.cos(system.phi[j]) * algebra.spin(j, "x") + np.sin(system.phi[j]) * algebra.spin(j, "y"))
        h = h + p1 @ hj
    h = TWO_PI * h
    evo = Evolution(h)
    half_u, full_u = evo.unitary(tau / 2), evo.unitary(tau)
    pi_x = pulse_operator(n, "x", np.pi, "nv")
    if initial is None:
        nuc, nw = _nuclear_columns(n, samples, seed)
    else:
        nuc, nw = nuclear_reduced(initial)
    psi, w = _tensor_nv([np.array([1, 0], complex)], np.array([1.0]), nuc, nw)
    state = QuantumState(psi=psi, weights=w, n_spins=n, nv_basis="lab")
    state = apply_pulse(state, "x", np.pi / 2, "nv")
    u = full_u @ pi_x
    body = half_u @ pi_x @ np.linalg.matrix_power(u, 2 * n_pairs - 1) @ half_u
    state = apply_unitary(state, body, 2 * n_pairs * tau)
    return apply_pulse(state, "-x", np.pi / 2, "nv")


def simulate_cpmg(system, tau: float, n_pairs: int, **kw) -> float:
    return measure_nv(run_cpmg(system, tau, n_pairs, **kw))
