"""Regenerate the bundled ARG183/ILE185 fragment from ideal internal coordinates.

Backbone in an extended strand (phi -120, psi 130), side chains in common
rotamers (ARG mtt, ILE mt). Output is angstrom PDB text on stdout.
"""

import numpy as np


def place(a, b, c, bond, angle, torsion):
    """Atom d with |cd| = bond, angle bcd and torsion abcd (degrees)."""
    angle, torsion = np.deg2rad(angle), np.deg2rad(torsion)
    bc = c - b
    bc /= np.linalg.norm(bc)
    n = np.cross(b - a, bc)
    n /= np.linalg.norm(n)
    m = np.column_stack([bc, np.cross(n, bc), n])
    d2 = bond * np.array([-np.cos(angle), np.sin(angle) * np.cos(torsion), np.sin(angle) * np.sin(torsion)])
    return c + m @ d2


def backbone(n_res, phi=-120.0, psi=130.0, omega=180.0):
    n = np.array([0.0, 1.458, 0.0])
    ca = np.array([0.0, 0.0, 0.0])
    c = place(np.array([1.0, 1.5, 0.0]), n, ca, 1.525, 111.2, -60.0)
    res = [dict(N=n, CA=ca, C=c)]
    for _ in range(n_res - 1):
        n = place(res[-1]["N"], res[-1]["CA"], res[-1]["C"], 1.329, 116.2, psi)
        ca = place(res[-1]["CA"], res[-1]["C"], n, 1.458, 121.7, omega)
        c = place(res[-1]["C"], n, ca, 1.525, 111.2, phi)
        res.append(dict(N=n, CA=ca, C=c))
    for k, r in enumerate(res):
        nxt = res[k + 1]["N"] if k + 1 < len(res) else None
        ref = nxt if nxt is not None else place(r["N"], r["CA"], r["C"], 1.329, 116.2, psi)
        r["O"] = place(ref, r["CA"], r["C"], 1.231, 120.5, 180.0)
        r["CB"] = place(r["C"], r["N"], r["CA"], 1.530, 110.5, -122.6)
    return res


def arg(r, chi=(-65.0, 180.0, 180.0, 180.0)):
    r["CG"] = place(r["N"], r["CA"], r["CB"], 1.520, 113.8, chi[0])
    r["CD"] = place(r["CA"], r["CB"], r["CG"], 1.520, 111.3, chi[1])
    r["NE"] = place(r["CB"], r["CG"], r["CD"], 1.460, 112.0, chi[2])
    r["CZ"] = place(r["CG"], r["CD"], r["NE"], 1.329, 124.2, chi[3])
    r["NH1"] = place(r["CD"], r["NE"], r["CZ"], 1.326, 120.0, 0.0)
    r["NH2"] = place(r["CD"], r["NE"], r["CZ"], 1.326, 120.0, 180.0)
    return ["N", "CA", "C", "O", "CB", "CG", "CD", "NE", "CZ", "NH1", "NH2"]


def ile(r, chi1=-65.0, chi2=170.0):
    r["CG1"] = place(r["N"], r["CA"], r["CB"], 1.530, 110.4, chi1)
    r["CG2"] = place(r["N"], r["CA"], r["CB"], 1.530, 110.5, chi1 - 120.0)
    r["CD1"] = place(r["CA"], r["CB"], r["CG1"], 1.520, 113.97, chi2)
    return ["N", "CA", "C", "O", "CB", "CG1", "CG2", "CD1"]


def main():
    res = backbone(3)
    names_183 = arg(res[0])
    names_185 = ile(res[2])
    lines = [
        "REMARK   1 SURROGATE BINDING-SITE FRAGMENT, NOT EXPERIMENTAL COORDINATES",
        "REMARK   1 ARG 183 AND ILE 185 HEAVY ATOMS BUILT FROM IDEAL BOND LENGTHS,",
        "REMARK   1 ANGLES AND COMMON ROTAMERS ON AN EXTENDED STRAND (RESIDUE 184",
        "REMARK   1 OMITTED). REGENERATE WITH tools/build_site_fragment.py.",
    ]
    serial = 1
    for r, names, rn, seq in ((res[0], names_183, "ARG", 183), (res[2], names_185, "ILE", 185)):
        for nm in names:
            x, y, z = r[nm]
            el = nm[0]
            lines.append(f"ATOM  {serial:5d} {nm:<4s} {rn} A{seq:4d}    {x:8.3f}{y:8.3f}{z:8.3f}  1.00 20.00          {el:>2s}")
            serial += 1
    lines.append("END")
    print("\n".join(lines))


if __name__ == "__main__":
    main()
