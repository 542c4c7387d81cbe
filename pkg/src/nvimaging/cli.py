"""Command-line front end.

Every command reads one JSON config (``--config``), applies dotted
``--set key.path=value`` overrides and writes into ``output_dir``. Exit codes:
0 success, 1 runtime or model error, 2 config or parse error.

Config sections (all optional unless a command needs them)::

    molecule   {"path": ..., "format": "pdb"|"json", "select": {...}} or {"builtin": "cxcr4"}
    placement  placement descriptor (see ingest.placement_from_dict) or {"path": ...}
    subset     list of spin indices kept after loading
    protocol   PulseProtocol fields, or {"preset": "fig3", ...overrides}
    sweep      {"axes": [{"parameter": "A", "values": [...]} |
                         {"parameter": "A", "start": x, "stop": y, "num": n}], "harmonic": n}
               or {"preset": "fig3", "num": n}
    t_d        diffusion time for scan2d (s)
    engine     "analytic" | "numeric"
    seed, workers, samples, output_dir
    reconstruct {"spectrum1d": path, "spectrum2d": path, "sigma_a": .., "sigma_b": .., "noise_floor": ..}
    budget     BudgetParams fields
    fieldmap   {"x_range": [lo, hi], "y_range": .., "z_range": .., "shape": [nx, ny, nz], "species": "13C"}
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, budget, ingest, protocol, qdyn, recon
from .analytic import FilterParams
from .spinsys import NvConfig, SpinSystem, field_map, field_map_csv, slab_grid

KNOWN_KEYS = {"molecule", "placement", "subset", "protocol", "sweep", "t_d", "engine", "seed", "workers",
              "samples", "output_dir", "reconstruct", "budget", "fieldmap"}
# keys that change how a run is executed but not what it computes
EXECUTION_KEYS = {"workers", "output_dir"}


class ConfigError(ValueError):
    """Bad configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


# -- config plumbing ------------------------------------------------------------------

def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config: dict, assignment: str) -> dict:
    """Set ``a.b.c=value`` in ``config``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like key.path=value")
    path, raw = assignment.split("=", 1)
    keys = path.strip().split(".")
    if not all(keys):
        raise ConfigError(path, "empty key in dotted path")
    node = config
    for k in keys[:-1]:
        nxt = node.get(k)
        if nxt is None:
            nxt = node[k] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(path, f"{k!r} is not a mapping")
        node = nxt
    node[keys[-1]] = parse_value(raw)
    return config


def load_config(path, overrides=()) -> dict:
    if path is None:
        cfg = {}
    else:
        p = Path(path)
        try:
            cfg = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError("config", f"file not found: {p}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"{p}:{exc.lineno}: {exc.msg}") from None
        if not isinstance(cfg, dict):
            raise ConfigError("config", "top level must be a JSON object")
        cfg["_base_dir"] = str(p.resolve().parent)
    for ov in overrides:
        apply_override(cfg, ov)
    unknown = set(cfg) - KNOWN_KEYS - {"_base_dir"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown config key")
    return cfg


def config_hash(cfg: dict) -> str:
    """SHA-256 over the canonical config, ignoring execution-only keys."""
    body = {k: v for k, v in cfg.items() if k not in EXECUTION_KEYS and not k.startswith("_")}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def _resolve(cfg, p):
    p = Path(p)
    if not p.is_absolute() and "_base_dir" in cfg:
        p = Path(cfg["_base_dir"]) / p
    return p


def _guard(path, func, *args, **kw):
    try:
        return func(*args, **kw)
    except ConfigError:
        raise
    except ingest.ParseError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(path, str(exc)) from None


def build_placement(cfg: dict) -> ingest.Placement:
    spec = cfg.get("placement")
    if spec is None:
        spec = {}
    if not isinstance(spec, dict):
        raise ConfigError("placement", "must be an object")
    if "path" in spec:
        p = _resolve(cfg, spec["path"])
        try:
            spec = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError("placement.path", f"file not found: {p}") from None
        except json.JSONDecodeError as exc:
            raise ingest.ParseError(exc.msg, exc.lineno, str(p)) from None
    return _guard("placement", ingest.placement_from_dict, spec)


def build_system(cfg: dict) -> SpinSystem:
    mol = cfg.get("molecule")
    if not isinstance(mol, dict):
        raise ConfigError("molecule", "missing or not an object")
    if mol.get("builtin") == "cxcr4":
        placement = build_placement(cfg) if cfg.get("placement") else None
        system = ingest.load_cxcr4_site(placement)
    elif "builtin" in mol:
        raise ConfigError("molecule.builtin", f"unknown builtin {mol['builtin']!r}")
    else:
        if "path" not in mol:
            raise ConfigError("molecule.path", "missing")
        path = _resolve(cfg, mol["path"])
        if not path.exists():
            raise ConfigError("molecule.path", f"file not found: {path}")
        placement = build_placement(cfg)
        system = _guard("molecule", ingest.load_system, path, placement, mol.get("format"), mol.get("select"),
                        mol.get("isotopes"))
    sub = cfg.get("subset")
    if sub is not None:
        if not isinstance(sub, list) or not all(isinstance(i, int) and 0 <= i < system.n_spins for i in sub):
            raise ConfigError("subset", "must be a list of valid spin indices")
        system = system.subset(sub)
    return system


def build_protocol(cfg: dict) -> protocol.PulseProtocol:
    spec = copy.deepcopy(cfg.get("protocol") or {"preset": "fig3"})
    if not isinstance(spec, dict):
        raise ConfigError("protocol", "must be an object")
    preset = spec.pop("preset", None)
    if preset == "fig3":
        filt = spec.pop("filter", None)
        base = _guard("protocol", protocol.fig3_protocol, **spec)
        if filt:
            base = replace(base, filter=_guard("protocol.filter", replace, base.filter, **filt))
        return base
    if preset is not None:
        raise ConfigError("protocol.preset", f"unknown preset {preset!r}")
    if isinstance(spec.get("filter"), dict):
        spec["filter"] = _guard("protocol.filter", lambda d: FilterParams(**d), spec["filter"])
    if "targets" in spec:
        spec["targets"] = tuple(spec["targets"])
    return _guard("protocol", lambda d: protocol.PulseProtocol(**d), spec)


def _axis_from_dict(d: dict, path: str, harmonic=None) -> protocol.SweepAxis:
    if not isinstance(d, dict) or "parameter" not in d:
        raise ConfigError(path, "axis needs a parameter")
    if "values" in d:
        values = d["values"]
    elif {"start", "stop", "num"} <= set(d):
        values = np.linspace(float(d["start"]), float(d["stop"]), int(d["num"]))
    else:
        raise ConfigError(path, "axis needs values or start/stop/num")
    return _guard(path, protocol.SweepAxis, d["parameter"], tuple(values), d.get("harmonic", harmonic))


def build_sweep(cfg: dict, base: protocol.PulseProtocol) -> protocol.SweepSpec:
    spec = cfg.get("sweep") or {"preset": "fig3"}
    if spec.get("preset") == "fig3":
        return protocol.SweepSpec((protocol.fig3_axis(n_points=int(spec.get("num", 201)),
                                                      decoupling=base.decoupling),))
    axes = spec.get("axes")
    if not isinstance(axes, list) or not axes:
        raise ConfigError("sweep.axes", "must be a non-empty list")
    return protocol.SweepSpec(tuple(_axis_from_dict(a, f"sweep.axes[{k}]", spec.get("harmonic"))
                                    for k, a in enumerate(axes)))


def _engine(cfg):
    eng = cfg.get("engine", "analytic")
    if eng not in ("analytic", "numeric"):
        raise ConfigError("engine", f"unknown engine {eng!r}")
    return eng


def _int(cfg, key, default):
    v = cfg.get(key, default)
    if v is None:
        return None
    if not isinstance(v, int) or isinstance(v, bool):
        raise ConfigError(key, "must be an integer")
    return v


def _stamp(cfg) -> dict:
    return {"config_hash": config_hash(cfg), "tool_version": __version__, "seed": _int(cfg, "seed", 0)}


def _header(cfg) -> str:
    s = _stamp(cfg)
    return "".join(f"# {k}={v}\n" for k, v in s.items())


def _out_dir(cfg, override=None) -> Path:
    d = Path(override or cfg.get("output_dir") or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write(path: Path, text: str):
    path.write_text(text)
    return path


# -- commands -----------------------------------------------------------------------------

def cmd_couplings(cfg: dict, out: Path) -> list:
    system = build_system(cfg)
    buf = io.StringIO()
    buf.write(_header(cfg))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "species", "a_hz", "b_perp_hz", "phi_rad", "x_nm", "y_nm", "z_nm"])
    for k, spin in enumerate(system.spins):
        pos = spin.position or (float("nan"),) * 3
        w.writerow([spin.label, spin.species, repr(float(system.a[k])), repr(float(system.b[k])),
                    repr(float(system.phi[k]))] + [repr(float(v)) for v in pos])
    dbuf = io.StringIO()
    dbuf.write(_header(cfg))
    dw = csv.writer(dbuf, lineterminator="\n")
    dw.writerow(["label"] + system.labels)
    for k, lab in enumerate(system.labels):
        dw.writerow([lab] + [repr(float(v)) for v in system.d_matrix[k]])
    return [_write(out / "couplings.csv", buf.getvalue()), _write(out / "d_matrix.csv", dbuf.getvalue())]


def _validate(system, base, sweep):
    msgs = []
    for axis in sweep.axes:
        om, tg = axis.points(base.resolved(system), system.omega_L if system.n_spins else protocol.FIG3_OMEGA_L)
        for o, g in zip(om, tg):
            for m in protocol.validate_protocol(base.at(o, g).resolved(system), system):
                if m not in msgs:
                    msgs.append(m)
    return msgs


class ValidationFailure(RuntimeError):
    def __init__(self, messages):
        self.messages = messages
        super().__init__("protocol validation failed:\n  " + "\n  ".join(messages))


def _spectrum_outputs(spec: protocol.Spectrum, cfg, out: Path, stem: str) -> list:
    spec.metadata.update(_stamp(cfg))
    return [_write(out / f"{stem}.csv", spec.to_csv()), _write(out / f"{stem}.json", spec.to_json() + "\n")]


def cmd_scan1d(cfg: dict, out: Path) -> list:
    system = build_system(cfg)
    base = build_protocol(cfg)
    sweep = build_sweep(cfg, base)
    if len(sweep.axes) != 1:
        raise ConfigError("sweep.axes", "scan1d needs exactly one axis")
    msgs = _validate(system, base, sweep)
    if msgs:
        raise ValidationFailure(msgs)
    spec = protocol.make_1d_scan(system, base, sweep, engine=_engine(cfg), workers=_int(cfg, "workers", None),
                                 seed=_int(cfg, "seed", 0), samples=_int(cfg, "samples", None))
    return _spectrum_outputs(spec, cfg, out, "scan1d")


def cmd_scan2d(cfg: dict, out: Path) -> list:
    system = build_system(cfg)
    base = build_protocol(cfg)
    sweep = build_sweep(cfg, base)
    t_d = cfg.get("t_d", protocol.FIG3_TD)
    if not isinstance(t_d, (int, float)) or t_d < 0:
        raise ConfigError("t_d", "must be a non-negative number")
    msgs = _validate(system, base, sweep)
    if msgs:
        raise ValidationFailure(msgs)
    spec = protocol.make_2d_scan(system, base, sweep, float(t_d), engine=_engine(cfg),
                                 workers=_int(cfg, "workers", None), seed=_int(cfg, "seed", 0),
                                 samples=_int(cfg, "samples", None))
    return _spectrum_outputs(spec, cfg, out, "scan2d")


def _read_spectrum(cfg, key):
    rc = cfg.get("reconstruct") or {}
    if not rc.get(key):
        return None
    p = _resolve(cfg, rc[key])
    if not p.exists():
        raise ConfigError(f"reconstruct.{key}", f"file not found: {p}")
    try:
        return protocol.Spectrum.from_json(p.read_text())
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ingest.ParseError(f"bad spectrum file ({exc})", source=str(p)) from None


def cmd_reconstruct(cfg: dict, out: Path) -> list:
    rc = cfg.get("reconstruct")
    if not isinstance(rc, dict):
        raise ConfigError("reconstruct", "missing or not an object")
    s1 = _read_spectrum(cfg, "spectrum1d")
    if s1 is None:
        raise ConfigError("reconstruct.spectrum1d", "missing")
    s2 = _read_spectrum(cfg, "spectrum2d")
    nv = build_placement(cfg).nv if cfg.get("placement") else None
    res = recon.reconstruct(s1, s2, nv=nv, sigma_a=float(rc.get("sigma_a", recon.SIGMA_A)),
                            sigma_b=float(rc.get("sigma_b", recon.SIGMA_B)),
                            noise_floor=float(rc.get("noise_floor", 1e-6)), seed=_int(cfg, "seed", 0))
    d = res.to_dict()
    d.update(_stamp(cfg))
    text = _header(cfg) + res.summary()
    return [_write(out / "reconstruction.json", json.dumps(d, indent=1, sort_keys=True) + "\n"),
            _write(out / "reconstruction.txt", text)]


def cmd_budget(cfg: dict, out: Path) -> list:
    spec = cfg.get("budget") or {}
    if not isinstance(spec, dict):
        raise ConfigError("budget", "must be an object")
    params = _guard("budget", lambda d: budget.BudgetParams(**d), spec)
    rep = budget.report(params)
    rep.update(_stamp(cfg))
    return [_write(out / "budget.json", json.dumps(rep, indent=1, sort_keys=True) + "\n")]


def cmd_fieldmap(cfg: dict, out: Path) -> list:
    spec = cfg.get("fieldmap") or {}
    nv = build_placement(cfg).nv if cfg.get("placement") else NvConfig.for_larmor(2e6)
    grid = _guard("fieldmap", slab_grid, spec.get("x_range", (-3.0, 3.0)), spec.get("y_range", (-3.0, 3.0)),
                  spec.get("z_range", (nv.depth, nv.depth + 1.0)), tuple(spec.get("shape", (21, 21, 5))))
    shift = _guard("fieldmap.species", field_map, nv, grid, spec.get("species", "13C"))
    return [_write(out / "fieldmap.csv", _header(cfg) + field_map_csv(grid, shift))]


COMMANDS = {"couplings": cmd_couplings, "scan1d": cmd_scan1d, "scan2d": cmd_scan2d,
            "reconstruct": cmd_reconstruct, "budget": cmd_budget, "fieldmap": cmd_fieldmap}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nvimaging", description="NV nanoscale NMR spectra and reconstruction")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY.PATH=VALUE",
                       help="override a config field (repeatable)")
        p.add_argument("-o", "--output-dir")
        p.add_argument("--workers", type=int)
        p.add_argument("--seed", type=int)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config, args.set)
        if args.workers is not None:
            cfg["workers"] = args.workers
        if args.seed is not None:
            cfg["seed"] = args.seed
        out = _out_dir(cfg, args.output_dir)
        written = COMMANDS[args.command](cfg, out)
    except (ConfigError, ingest.ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValidationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (recon.ReconstructionError, qdyn.ProtocolError, qdyn.HilbertSpaceError, ValueError,
            RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for p in written:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
