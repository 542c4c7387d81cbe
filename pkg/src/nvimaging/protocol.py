"""Pulse protocols, validation and 1D/2D spectral scans."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from typing import Optional, Sequence

import numpy as np

from . import analytic, qdyn
from .analytic import DEFAULT_MEMORY_T2, FilterParams, decoupling_scales

PROTOCOL_KINDS = ("dd_sense", "cp_sense", "filtered_cp", "reverse_sense")
DIP_THRESHOLD = 0.95

# Fig. 3 operating point
FIG3_OMEGA_L = 2e6
FIG3_F = 30
FIG3_CONTACT = 720e-6
FIG3_TG_RANGE = (201.68e-6, 201.84e-6)
FIG3_HARMONIC = 404
FIG3_TD = 300e-6


@dataclass(frozen=True)
class PulseProtocol:
    """One experiment run.

    ``rabi`` is the spin-lock drive Omega (Hz); ``contact_time`` the total
    spin-lock time t. ``wahuha_cycle`` is the longest allowed cycle; ``None``
    picks ``min(t/(10F), 1/(4 max|D|))`` when resolved against a system.
    ``memory_t2`` switches on memory dephasing in the numeric engine.
    """

    kind: str = "filtered_cp"
    rabi: float = 2e6
    contact_time: float = FIG3_CONTACT
    filter: Optional[FilterParams] = None
    t_d: float = 0.0
    decoupling: str = "none"
    wahuha_cycle: Optional[float] = None
    decouple_spinlock: bool = True
    decouple_gradient: bool = True
    include_initial_pi2: Optional[bool] = None
    lock_shift: Optional[float] = None
    memory_t2: Optional[float] = None
    memory_decay: str = "gaussian"
    tau: Optional[float] = None
    n_pairs: Optional[int] = None
    targets: tuple = ()

    def __post_init__(self):
        if self.kind not in PROTOCOL_KINDS:
            raise ValueError(f"unknown protocol kind {self.kind!r}")
        if self.include_initial_pi2 is None:
            object.__setattr__(self, "include_initial_pi2", self.kind != "reverse_sense")
        if self.kind == "reverse_sense" and self.include_initial_pi2:
            raise ValueError("reverse sensing omits the opening pi/2")
        if self.kind in ("filtered_cp", "reverse_sense") and self.filter is not None:
            if self.filter.t_g <= 0 and self.kind == "filtered_cp":
                raise ValueError("filtered protocols need t_g > 0")
        if self.kind == "filtered_cp" and self.filter is None:
            raise ValueError("filtered_cp needs filter parameters")
        if self.kind == "dd_sense" and (not self.tau or not self.n_pairs):
            raise ValueError("dd_sense needs tau and n_pairs")
        if self.decoupling not in analytic.DECOUPLING_KINDS:
            raise ValueError(f"unknown decoupling {self.decoupling!r}")
        if self.contact_time <= 0 and self.kind != "dd_sense":
            raise ValueError("contact time must be positive")
        if self.t_d < 0:
            raise ValueError("t_d must be non-negative")
        object.__setattr__(self, "targets", tuple(float(a) for a in self.targets))

    @property
    def F(self) -> int:
        return self.filter.F if self.filter is not None else 1

    @property
    def t_g(self) -> float:
        return self.filter.t_g if self.filter is not None else 0.0

    @property
    def scales(self) -> analytic.CouplingScales:
        return decoupling_scales(self.decoupling, self.lock_shift)

    def at(self, Omega: Optional[float] = None, t_g: Optional[float] = None) -> "PulseProtocol":
        """Copy with a new drive and/or gradient interval."""
        p = self
        if Omega is not None:
            p = replace(p, rabi=float(Omega))
        if t_g is not None and p.filter is not None:
            p = replace(p, filter=replace(p.filter, t_g=float(t_g), allow_long_memory=True))
        return p

    def resolved(self, system) -> "PulseProtocol":
        """Fill in the WAHUHA cycle time from the system couplings."""
        if self.decoupling != "wahuha" or self.wahuha_cycle is not None:
            return self
        return replace(self, wahuha_cycle=default_wahuha_cycle(self, system))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["targets"] = list(self.targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PulseProtocol":
        d = dict(d)
        if d.get("filter") is not None:
            d["filter"] = FilterParams(**d["filter"])
        if "targets" in d:
            d["targets"] = tuple(d["targets"])
        return cls(**d)


def default_wahuha_cycle(protocol: PulseProtocol, system) -> float:
    limit = protocol.contact_time / (10 * protocol.F)
    dmax = float(np.max(np.abs(system.d_matrix))) if system.n_spins > 1 else 0.0
    if dmax > 0:
        limit = min(limit, 1 / (4 * dmax))
    return limit


def fig3_protocol(decoupling: str = "wahuha", **kw) -> PulseProtocol:
    """Filtered cross-polarisation at the Fig. 3 operating point."""
    filt = FilterParams(F=FIG3_F, t_g=sum(FIG3_TG_RANGE) / 2, t=FIG3_CONTACT, harmonic=FIG3_HARMONIC)
    return PulseProtocol(kind="filtered_cp", rabi=FIG3_OMEGA_L, contact_time=FIG3_CONTACT, filter=filt,
                         decoupling=decoupling, **kw)


# -- sweeps -------------------------------------------------------------------------

SWEEP_PARAMETERS = ("A", "Omega", "t_g", "t_d", "harmonic")
UNITS = {"A": "Hz", "Omega": "Hz", "t_g": "s", "t_d": "s", "harmonic": "1"}


@dataclass(frozen=True)
class SweepAxis:
    """Swept parameter and its values.

    ``A`` is the co-swept on-resonance coupling: Omega = omega_L + lock*A and
    t_g = n_h/(omega_L + gradient*A), with the decoupling scales of the base
    protocol and the harmonic ``n_h``.
    """

    parameter: str
    values: tuple
    harmonic: Optional[int] = None

    def __post_init__(self):
        if self.parameter not in SWEEP_PARAMETERS:
            raise ValueError(f"unknown sweep parameter {self.parameter!r}")
        v = np.asarray(self.values, dtype=float).ravel()
        if v.size == 0:
            raise ValueError("sweep axis is empty")
        if v.size > 1:
            dv = np.diff(v)
            if not (np.all(dv > 0) or np.all(dv < 0)):
                raise ValueError("sweep values must be strictly monotone")
        object.__setattr__(self, "values", tuple(float(x) for x in v))

    def points(self, base: PulseProtocol, omega_L: float):
        """(Omega, t_g) arrays for every value."""
        v = np.asarray(self.values)
        sc = base.scales
        om = np.full(v.shape, base.rabi)
        tg = np.full(v.shape, base.t_g)
        if self.parameter == "A":
            om = omega_L + sc.lock * v
            if base.filter is not None:
                n_h = self.harmonic or base.filter.harmonic
                if n_h is None:
                    raise ValueError("co-swept axis needs a harmonic")
                tg = n_h / (omega_L + sc.gradient * v)
        elif self.parameter == "Omega":
            om = v.copy()
        elif self.parameter == "t_g":
            tg = v.copy()
        elif self.parameter == "harmonic":
            a_res = (base.rabi - omega_L) / sc.lock
            tg = v / (omega_L + sc.gradient * a_res)
        return om, tg


@dataclass(frozen=True)
class SweepSpec:
    axes: tuple

    def __post_init__(self):
        axes = tuple(self.axes)
        if not 1 <= len(axes) <= 2:
            raise ValueError("a sweep has one or two axes")
        object.__setattr__(self, "axes", axes)


def fig3_axis(n_points: int = 201, omega_L: float = FIG3_OMEGA_L, harmonic: int = FIG3_HARMONIC,
              tg_range=FIG3_TG_RANGE, decoupling: str = "wahuha") -> SweepAxis:
    """Co-swept A axis spanning the Fig. 3 gradient-time window."""
    g = decoupling_scales(decoupling).gradient
    a = (harmonic / np.asarray(tg_range[::-1]) - omega_L) / g
    return SweepAxis("A", tuple(np.linspace(a[0], a[1], n_points)), harmonic)


# -- spectra -------------------------------------------------------------------------

@dataclass
class Spectrum:
    """Signal on a 1D or 2D grid.

    ``axes`` entries are dicts with ``name``, ``unit``, ``values`` and the
    derived ``omega_hz`` / ``t_g_s`` of every point.
    """

    axes: list
    values: np.ndarray
    metadata: dict = field(default_factory=dict)
    engine: str = "analytic"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        shape = tuple(len(a["values"]) for a in self.axes)
        if self.values.shape != shape:
            raise ValueError(f"values shape {self.values.shape} differs from axes {shape}")
        if self.values.size and (self.values.min() < -1e-6 or self.values.max() > 1 + 1e-6):
            raise ValueError("signal outside [0, 1]")

    @property
    def dims(self) -> int:
        return len(self.axes)

    def axis(self, k: int = 0) -> np.ndarray:
        return np.asarray(self.axes[k]["values"], dtype=float)

    def to_json(self) -> str:
        return json.dumps({"dims": self.dims, "engine": self.engine,
                           "axes": [_jsonable(a) for a in self.axes],
                           "values": [float(v) for v in self.values.ravel()],
                           "metadata": self.metadata}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Spectrum":
        d = json.loads(text)
        shape = tuple(len(a["values"]) for a in d["axes"])
        return cls(axes=d["axes"], values=np.asarray(d["values"], dtype=float).reshape(shape),
                   metadata=d.get("metadata", {}), engine=d.get("engine", "analytic"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        for key in ("config_hash", "tool_version", "seed"):
            if key in self.metadata:
                buf.write(f"# {key}={self.metadata[key]}\n")
        w = csv.writer(buf, lineterminator="\n")
        if self.dims == 1:
            a = self.axes[0]
            w.writerow([f"{a['name']}_{a['unit']}", "omega_hz", "t_g_s", "signal"])
            for k, v in enumerate(self.values):
                w.writerow([repr(float(a["values"][k])), repr(float(a["omega_hz"][k])),
                            repr(float(a["t_g_s"][k])), repr(float(v))])
        else:
            p, q = self.axes
            w.writerow([f"p_{p['name']}_{p['unit']}", f"q_{q['name']}_{q['unit']}", "signal"])
            for i in range(len(p["values"])):
                for j in range(len(q["values"])):
                    w.writerow([repr(float(p["values"][i])), repr(float(q["values"][j])),
                                repr(float(self.values[i, j]))])
        return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _axis_record(axis: SweepAxis, om, tg) -> dict:
    return {"name": axis.parameter, "unit": UNITS[axis.parameter], "values": list(axis.values),
            "omega_hz": [float(x) for x in om], "t_g_s": [float(x) for x in tg], "harmonic": axis.harmonic}


# -- worker pool ------------------------------------------------------------------------

def parallel_map(func, items: Sequence, workers: Optional[int] = 1) -> list:
    """Order-preserving map; ``workers`` None uses every core, 1 runs inline."""
    items = list(items)
    if workers is None:
        workers = os.cpu_count() or 1
    if workers <= 1 or len(items) <= 1:
        return [func(x) for x in items]
    chunk = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items, chunksize=chunk))


def _numeric_point(args, system, seed, samples):
    protocol, = args
    state = qdyn.run_sequence(system, protocol, samples=samples, seed=seed)
    return qdyn.measure_nv(state)


def _numeric_row(args, system, reverse_base, q_points, seed, samples):
    forward, = args
    state = qdyn.run_sequence(system, forward, samples=samples, seed=seed)
    row = []
    for om, tg in q_points:
        rev = reverse_base.at(om, tg)
        row.append(qdyn.measure_nv(qdyn.run_sequence(system, rev, initial=state)))
    return row


def _check_engine(system, engine):
    if engine not in ("analytic", "numeric"):
        raise ValueError(f"unknown engine {engine!r}")
    if engine == "numeric" and system.n_spins > qdyn.MAX_SPINS:
        raise qdyn.HilbertSpaceError(f"numeric engine limited to {qdyn.MAX_SPINS} spins")


def _base_metadata(system, base, engine, seed):
    return {"system": system.fingerprint(), "protocol": _jsonable(base.to_dict()), "engine": engine,
            "seed": seed}


def make_1d_scan(system, base: PulseProtocol, sweep, engine: str = "analytic", workers: Optional[int] = 1,
                 seed: int = 0, samples: Optional[int] = None) -> Spectrum:
    """One signal value per point of a single-axis sweep."""
    _check_engine(system, engine)
    axis = sweep.axes[0] if isinstance(sweep, SweepSpec) else sweep
    if isinstance(sweep, SweepSpec) and len(sweep.axes) != 1:
        raise ValueError("1D scan needs exactly one axis")
    base = base.resolved(system)
    om, tg = axis.points(base, system.omega_L if system.n_spins else FIG3_OMEGA_L)
    if engine == "analytic":
        if base.kind == "reverse_sense" or system.n_spins == 0:
            vals = np.full(om.shape, 0.5 if base.kind == "reverse_sense" else 1.0)
        else:
            vals = analytic.cp_signal(system, om, base.contact_time, base.F, tg, base.scales)
    else:
        if system.n_spins == 0:
            vals = np.full(om.shape, 0.5 if base.kind == "reverse_sense" else 1.0)
        else:
            protos = [(base.at(o, g),) for o, g in zip(om, tg)]
            vals = np.array(parallel_map(partial(_numeric_point, system=system, seed=seed, samples=samples),
                                         protos, workers))
    return Spectrum(axes=[_axis_record(axis, om, tg)], values=np.asarray(vals, dtype=float),
                    metadata=_base_metadata(system, base, engine, seed), engine=engine)


def make_2d_scan(system, base: PulseProtocol, sweep, t_d: float, engine: str = "analytic",
                 workers: Optional[int] = 1, seed: int = 0, samples: Optional[int] = None) -> Spectrum:
    """Polarise at p (rows), diffuse ``t_d``, reverse-sense at q (columns)."""
    _check_engine(system, engine)
    axes = sweep.axes if isinstance(sweep, SweepSpec) else (sweep,)
    ax_p, ax_q = (axes[0], axes[0]) if len(axes) == 1 else axes
    base = base.resolved(system)
    wl = system.omega_L if system.n_spins else FIG3_OMEGA_L
    om_p, tg_p = ax_p.points(base, wl)
    om_q, tg_q = ax_q.points(base, wl)
    forward = replace(base, kind="filtered_cp" if base.filter is not None else "cp_sense",
                      include_initial_pi2=True, t_d=float(t_d))
    reverse = replace(base, kind="reverse_sense", include_initial_pi2=False, t_d=0.0)
    if system.n_spins == 0:
        vals = np.full((len(om_p), len(om_q)), 0.5)
    elif engine == "analytic":
        vals = analytic.twod_signal(system, om_p, tg_p, om_q, tg_q, base.contact_time, base.F, t_d, base.scales)
    else:
        rows = [(forward.at(o, g),) for o, g in zip(om_p, tg_p)]
        func = partial(_numeric_row, system=system, reverse_base=reverse, q_points=list(zip(om_q, tg_q)),
                       seed=seed, samples=samples)
        vals = np.array(parallel_map(func, rows, workers))
    meta = _base_metadata(system, base, engine, seed)
    meta["t_d_s"] = float(t_d)
    return Spectrum(axes=[_axis_record(ax_p, om_p, tg_p), _axis_record(ax_q, om_q, tg_q)],
                    values=np.asarray(vals, dtype=float), metadata=meta, engine=engine)


def make_3d_scan(system, base, sweep, t_d_values, **kw) -> list:
    """Batch of 2D scans over diffusion times."""
    return [make_2d_scan(system, base, sweep, t_d, **kw) for t_d in t_d_values]


# -- validation -------------------------------------------------------------------------

def validate_protocol(protocol: PulseProtocol, system, memory_t2: float = DEFAULT_MEMORY_T2) -> list:
    """Human-readable constraint violations (empty when the protocol is usable).

    Checks the memory budget (F t_g must stay below T2n*), bandwidth coverage
    of ``protocol.targets``, the WAHUHA cycle limits and, when a harmonic is
    recorded, that t_g puts the drive-matched coupling on that harmonic.
    """
    out = []
    sc = protocol.scales
    wl = system.omega_L if system.n_spins else FIG3_OMEGA_L
    filt = protocol.filter
    if filt is not None and protocol.kind in ("filtered_cp", "reverse_sense"):
        total = filt.F * filt.t_g
        if total >= memory_t2:
            out.append(f"memory: F*t_g = {total * 1e3:.4g} ms reaches T2n* = {memory_t2 * 1e3:.4g} ms")
        if protocol.targets and filt.t_g > 0:
            spread = sc.gradient * (max(protocol.targets) - min(protocol.targets))
            if spread >= 1 / filt.t_g:
                out.append(f"bandwidth: target spread {spread:.4g} Hz exceeds 1/t_g = {1 / filt.t_g:.4g} Hz")
        if filt.harmonic is not None and filt.t_g > 0:
            a_res = (protocol.rabi - wl) / sc.lock
            order = filt.t_g * (wl + sc.gradient * a_res)
            if abs(order - filt.harmonic) > 0.5 / filt.F:
                out.append(f"harmonic: t_g*(omega_L + A) = {order:.4f}, expected {filt.harmonic}")
    if protocol.decoupling == "wahuha":
        cyc = protocol.wahuha_cycle if protocol.wahuha_cycle is not None else default_wahuha_cycle(protocol, system)
        seg = protocol.contact_time / protocol.F
        if cyc > seg:
            out.append(f"wahuha: cycle {cyc * 1e6:.4g} us longer than the spin-lock segment {seg * 1e6:.4g} us")
        elif cyc > seg / 10 * (1 + 1e-9):
            out.append(f"wahuha: fewer than 10 cycles per spin-lock segment ({cyc * 1e6:.4g} us)")
        dmax = float(np.max(np.abs(system.d_matrix))) if system.n_spins > 1 else 0.0
        if dmax > 0 and cyc > 1 / (4 * dmax) * (1 + 1e-9):
            out.append(f"wahuha: cycle {cyc * 1e6:.4g} us exceeds 1/(4 max|D|) = {1e6 / (4 * dmax):.4g} us")
    return out


def pick_harmonic(A_target: float, omega_L: float, memory_t2: float, F: int, gradient_scale: float = 1.0):
    """Largest harmonic ``n_h`` with ``F * n_h/(omega_L + A)`` below ``memory_t2``.

    Returns ``(n_h, t_g)``.
    """
    f = omega_L + gradient_scale * A_target
    if f <= 0:
        raise ValueError("omega_L + A must be positive")
    n_h = math.ceil(memory_t2 * f / F) - 1
    if n_h < 1:
        raise ValueError("no harmonic fits inside the memory time")
    return n_h, n_h / f


def dip_indices(values, threshold: float = DIP_THRESHOLD) -> np.ndarray:
    """Interior local minima below ``threshold`` (3-point neighbourhood)."""
    v = np.asarray(values, dtype=float)
    if v.size < 3:
        return np.array([], dtype=int)
    mid = v[1:-1]
    mask = (mid < threshold) & (mid < v[:-2]) & (mid <= v[2:])
    return np.flatnonzero(mask) + 1


def count_dips(values, threshold: float = DIP_THRESHOLD) -> int:
    return int(dip_indices(values, threshold).size)
