"""Search for a placement of the bundled ARG/ILE fragment under the NV.

The fragment geometry fixes the carbon arrangement but not its pose above the
NV. This script draws random rigid poses and keeps those that give a
spectrum with the intended structure at the published operating point:

- all atoms at least 0.15 nm above the surface (NV depth 1.75 nm);
- the 12-carbon analytic spectrum has exactly ``--dips`` dips, at 201 and at
  1601 points, each with prominence of at least 5e-3;
- the six in-window carbons with 200 Hz < B < 0.9/(2 rate t) (largest B
  first) give one clean dip per resolvable group of couplings.

Usage: python tools/calibrate_placement.py --seed 11 --trials 1000000 > placement.json
"""

import argparse
import json
import sys

import numpy as np
from scipy.signal import find_peaks
from scipy.spatial.transform import Rotation

from nvimaging import ingest
from nvimaging import protocol as pr
from nvimaging.spinsys import NvConfig

MIN_PROMINENCE = 5e-3


def dip_summary(system, base, axis):
    v = pr.make_1d_scan(system, base, axis).values
    idx, props = find_peaks(-v, prominence=0)
    keep = v[idx] < pr.DIP_THRESHOLD
    return pr.count_dips(v), props["prominences"][keep], np.asarray(axis.values)[idx[keep]]


def clean(system, base, axes, n):
    for axis in axes:
        count, prom, _ = dip_summary(system, base, axis)
        if count != n or len(prom) != n or (n and prom.min() < MIN_PROMINENCE):
            return False
    return True


def subset_indices(system, window, rate, t, spacing):
    ok = (system.a > window[0] + spacing / 2) & (system.a < window[1] - spacing / 2)
    ok &= (system.b > 200) & (system.b < 0.9 / (2 * rate * t))
    idx = np.flatnonzero(ok)
    return sorted(idx[np.argsort(-system.b[idx])][:6].tolist())


def search(seed, trials, n_dips, depth=1.75):
    atoms = ingest.read_pdb(ingest.cxcr4_site_path())
    xyz = np.array([a.xyz for a in atoms]) * 0.1
    center = xyz.mean(axis=0)
    carbons = ingest.select_atoms(atoms, elements=["C"])
    base = pr.fig3_protocol()
    axes = (pr.fig3_axis(201), pr.fig3_axis(1601))
    window = (axes[0].values[0], axes[0].values[-1])
    sc = base.scales
    spacing = 1 / (base.F * base.t_g * sc.gradient)
    nv = NvConfig.for_larmor(2e6, depth=depth)
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        rot = Rotation.random(random_state=rng).as_matrix()
        off = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(2.1, 2.9)])
        if ((xyz - center) @ rot.T + off)[:, 2].min() < depth + 0.15:
            continue
        pl = ingest.Placement(nv=nv, offset_nm=tuple(off), rotation=tuple(map(tuple, rot)), center=True)
        system = ingest.system_from_atoms(carbons, pl)
        sel = subset_indices(system, window, sc.rate, base.contact_time, spacing)
        if len(sel) < 6:
            continue
        sub = system.subset(sel)
        a = np.sort(sub.a)
        groups = np.split(a, np.flatnonzero(np.diff(a) > spacing) + 1)
        if len(groups) < 4:
            continue
        _, _, centers = dip_summary(sub, base, axes[0])
        if len(centers) != len(groups):
            continue
        if np.max(np.abs(np.sort(centers) - [g.mean() for g in groups])) > spacing / 4:
            continue
        if not clean(system, base, axes, n_dips) or not clean(sub, base, axes, len(groups)):
            continue
        return trial, {"nv_depth_nm": depth, "nv_axis": [0.0, 0.0, 1.0], "larmor_hz": 2e6, "species": "13C",
                       "center": True, "offset_nm": [round(float(v), 12) for v in off],
                       "rotation": {"matrix": np.round(rot, 12).tolist()}}, sel
    return None


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--trials", type=int, default=1_000_000)
    ap.add_argument("--dips", type=int, default=8)
    args = ap.parse_args(argv)
    found = search(args.seed, args.trials, args.dips)
    if found is None:
        print("no placement found", file=sys.stderr)
        return 1
    trial, placement, sel = found
    print(f"trial {trial}, subset {sel}", file=sys.stderr)
    print(json.dumps(placement, indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
