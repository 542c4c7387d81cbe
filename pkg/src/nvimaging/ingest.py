"""Molecule ingestion: PDB ATOM/HETATM subset, JSON spin lists, placement.

PDB coordinates are in angstrom and are converted to nm. A placement
descriptor moves the molecule into the lab frame (NV at the origin, surface
normal +z) before the one-time transform into the NV frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .constants import DEFAULT_ISOTOPE
from .spinsys import NuclearSpin, NvConfig, SpinSystem


class ParseError(ValueError):
    """Malformed input; ``lineno`` is 1-based when known."""

    def __init__(self, message, lineno=None, source=None):
        self.lineno = lineno
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}"
        if lineno is not None:
            where += f":{lineno}"
        super().__init__(f"{where}: {message}" if where else message)


@dataclass(frozen=True)
class Atom:
    serial: int
    name: str
    res_name: str
    chain: str
    res_seq: int
    xyz: tuple  # angstrom
    element: str

    @property
    def label(self) -> str:
        return f"{self.res_name}{self.res_seq}{self.chain}:{self.name}".replace(" ", "")


def parse_pdb(text: str, source: Optional[str] = None) -> list[Atom]:
    """Parse ATOM/HETATM records from PDB text; everything else is skipped.

    Only the first MODEL is read. Missing element columns fall back to the
    first letter of the atom name.
    """
    atoms = []
    in_model = False
    for lineno, line in enumerate(text.splitlines(), start=1):
        rec = line[:6]
        if rec.startswith("MODEL"):
            if in_model:
                break
            in_model = True
            continue
        if rec.startswith("ENDMDL"):
            break
        if rec not in ("ATOM  ", "HETATM"):
            continue
        try:
            serial = int(line[6:11])
            name = line[12:16].strip()
            res_name = line[17:20].strip()
            chain = line[21:22].strip()
            res_seq = int(line[22:26])
            xyz = (float(line[30:38]), float(line[38:46]), float(line[46:54]))
        except (ValueError, IndexError) as exc:
            raise ParseError(f"bad {rec.strip()} record ({exc})", lineno, source) from None
        element = line[76:78].strip() if len(line) >= 78 else ""
        if not element:
            element = name.lstrip("0123456789")[:1]
        atoms.append(Atom(serial, name, res_name, chain, res_seq, xyz, element.capitalize()))
    return atoms


def read_pdb(path) -> list[Atom]:
    path = Path(path)
    return parse_pdb(path.read_text(), source=str(path))


def select_atoms(atoms: Iterable[Atom], elements=None, res_names=None, res_seqs=None,
                 chains=None, names=None) -> list[Atom]:
    """Filter atoms; each criterion is an optional collection, ``None`` = any."""
    def ok(value, allowed):
        return allowed is None or value in allowed

    elements = None if elements is None else {e.capitalize() for e in elements}
    res_names = None if res_names is None else {r.upper() for r in res_names}
    return [a for a in atoms
            if ok(a.element, elements) and ok(a.res_name, res_names) and ok(a.res_seq, res_seqs)
            and ok(a.chain, chains) and ok(a.name, names)]


@dataclass(frozen=True)
class Placement:
    """Where the molecule sits relative to the NV.

    The molecule (nm) is optionally centred on its centroid, rotated by
    ``rotation`` (3x3), then shifted by ``offset_nm``; the result is in the lab
    frame.
    """

    nv: NvConfig
    offset_nm: tuple = (0.0, 0.0, 0.0)
    rotation: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    center: bool = False

    def apply(self, xyz_nm) -> np.ndarray:
        p = np.asarray(xyz_nm, dtype=float).reshape(-1, 3)
        if self.center and len(p):
            p = p - p.mean(axis=0)
        return p @ np.asarray(self.rotation).T + np.asarray(self.offset_nm)


def rotation_matrix(axis, angle_deg: float) -> np.ndarray:
    """Right-handed rotation about ``axis`` by ``angle_deg``."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    t = np.deg2rad(angle_deg)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(t) * kx + (1 - np.cos(t)) * kx @ kx


def placement_from_dict(d: dict) -> Placement:
    """Build a :class:`Placement` from a descriptor mapping.

    Keys: ``nv_depth_nm``, ``nv_axis``, ``larmor_hz`` or ``b_field_t``,
    ``species`` (for ``larmor_hz``), ``offset_nm``, ``rotation`` as either a
    3x3 ``matrix`` or a list of ``{"axis": [...], "angle_deg": x}`` applied in
    order, and ``center``.
    """
    known = {"nv_depth_nm", "nv_axis", "larmor_hz", "b_field_t", "species", "offset_nm",
             "rotation", "center", "rabi_hz"}
    unknown = set(d) - known
    if unknown:
        raise ParseError(f"unknown placement keys {sorted(unknown)}")
    axis = np.asarray(d.get("nv_axis", (0, 0, 1)), dtype=float)
    axis = tuple(axis / np.linalg.norm(axis))
    kw = dict(depth=float(d.get("nv_depth_nm", 1.75)), axis=axis, rabi_frequency=d.get("rabi_hz"))
    if "b_field_t" in d:
        nv = NvConfig(b_field=float(d["b_field_t"]), **kw)
    else:
        nv = NvConfig.for_larmor(float(d.get("larmor_hz", 2e6)), d.get("species", "13C"), **kw)
    rot = np.eye(3)
    spec = d.get("rotation")
    if isinstance(spec, dict) and "matrix" in spec:
        rot = np.asarray(spec["matrix"], dtype=float)
    elif spec:
        for step in spec:
            rot = rotation_matrix(step["axis"], step["angle_deg"]) @ rot
    if rot.shape != (3, 3) or not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9):
        raise ParseError("placement rotation is not orthogonal")
    return Placement(nv=nv, offset_nm=tuple(float(v) for v in d.get("offset_nm", (0, 0, 0))),
                     rotation=tuple(map(tuple, rot)), center=bool(d.get("center", False)))


def system_from_atoms(atoms: list[Atom], placement: Placement, isotopes: Optional[dict] = None) -> SpinSystem:
    """Spin system from parsed atoms. Elements map to isotopes via
    ``isotopes`` (defaults: C -> 13C, H -> 1H, N -> 15N ...)."""
    iso = dict(DEFAULT_ISOTOPE)
    iso.update(isotopes or {})
    if not atoms:
        return SpinSystem.from_spins(placement.nv, [])
    xyz_nm = np.array([a.xyz for a in atoms]) * 0.1
    lab = placement.apply(xyz_nm)
    nvf = placement.nv.to_nv_frame(lab)
    spins = []
    for a, p in zip(atoms, nvf):
        if a.element not in iso:
            raise ParseError(f"no isotope mapping for element {a.element!r} ({a.label})")
        spins.append(NuclearSpin(species=iso[a.element], position=tuple(p), label=a.label))
    return SpinSystem.from_spins(placement.nv, spins)


def parse_spin_list(data, source=None) -> list[NuclearSpin]:
    """JSON spin list ``[{label, species, position_nm: [x, y, z]}, ...]``,
    positions already in the NV frame."""
    if isinstance(data, str):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, exc.lineno, source) from None
    if not isinstance(data, list):
        raise ParseError("spin list must be a JSON array", source=source)
    spins = []
    for k, entry in enumerate(data):
        try:
            pos = entry["position_nm"]
            if len(pos) != 3:
                raise ValueError("position_nm needs 3 components")
            spins.append(NuclearSpin(species=entry.get("species", "13C"),
                                     position=tuple(float(v) for v in pos),
                                     label=str(entry.get("label", f"s{k}"))))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"entry [{k}]: {exc}", source=source) from None
    return spins


def load_system(molecule_path, placement: Placement, fmt: Optional[str] = None, select: Optional[dict] = None,
                isotopes: Optional[dict] = None) -> SpinSystem:
    """Read a PDB or JSON spin list and return the placed spin system."""
    path = Path(molecule_path)
    fmt = fmt or ("json" if path.suffix.lower() == ".json" else "pdb")
    if fmt == "pdb":
        atoms = read_pdb(path)
        if select:
            atoms = select_atoms(atoms, **select)
        return system_from_atoms(atoms, placement, isotopes)
    if fmt == "json":
        spins = parse_spin_list(path.read_text(), source=str(path))
        if select and select.get("species"):
            spins = [s for s in spins if s.species in set(select["species"])]
        return SpinSystem.from_spins(placement.nv, spins)
    raise ParseError(f"unknown molecule format {fmt!r}")


def cxcr4_site_path() -> Path:
    """Bundled ARG183/ILE185 binding-site fragment (see the file header)."""
    return Path(__file__).with_name("data") / "cxcr4_arg183_ile185.pdb"


def cxcr4_placement_path() -> Path:
    return Path(__file__).with_name("data") / "cxcr4_placement.json"


def load_cxcr4_site(placement: Optional[Placement] = None) -> SpinSystem:
    """The 12 13C spins of the bundled binding-site fragment, placed above a
    1.75 nm deep NV at omega_L = 2 MHz."""
    if placement is None:
        placement = placement_from_dict(json.loads(cxcr4_placement_path().read_text()))
    return load_system(cxcr4_site_path(), placement, select={"elements": ["C"]})
