import json

import numpy as np
import pytest

from nvimaging import ingest
from nvimaging.spinsys import NvConfig

PDB = """\
HEADER    TEST
ATOM      1  N   ALA A   1       0.000   0.000   0.000  1.00  0.00           N
ATOM      2  CA  ALA A   1       1.458   0.000   0.000  1.00  0.00           C
ATOM      3  CB  ALA A   1       1.988   1.420   0.000  1.00  0.00
HETATM    4  C1  LIG B   9      -1.000   2.000   3.000  1.00  0.00           C
END
"""


def test_parse_pdb_fields_and_element_fallback():
    atoms = ingest.parse_pdb(PDB)
    assert [a.element for a in atoms] == ["N", "C", "C", "C"]
    assert atoms[1].xyz == (1.458, 0.0, 0.0)
    assert atoms[3].res_name == "LIG" and atoms[3].chain == "B" and atoms[3].res_seq == 9
    assert atoms[1].label == "ALA1A:CA"


def test_parse_pdb_error_has_line_number():
    bad = PDB.replace("   1.458", "   x.xxx")
    with pytest.raises(ingest.ParseError) as exc:
        ingest.parse_pdb(bad, source="t.pdb")
    assert exc.value.lineno == 3 and "t.pdb:3" in str(exc.value)


def test_first_model_only():
    text = "MODEL 1\n" + PDB.splitlines()[1] + "\nENDMDL\nMODEL 2\n" + PDB.splitlines()[2] + "\nENDMDL\n"
    assert len(ingest.parse_pdb(text)) == 1


def test_select_atoms():
    atoms = ingest.parse_pdb(PDB)
    assert len(ingest.select_atoms(atoms, elements=["c"])) == 3
    assert len(ingest.select_atoms(atoms, res_names=["lig"])) == 1
    assert len(ingest.select_atoms(atoms, elements=["C"], chains=["A"])) == 2


def test_placement_and_system():
    atoms = ingest.select_atoms(ingest.parse_pdb(PDB), elements=["C"])
    pl = ingest.placement_from_dict({"nv_depth_nm": 1.5, "larmor_hz": 1e6, "offset_nm": [0, 0, 2.0],
                                     "rotation": [{"axis": [0, 0, 1], "angle_deg": 90}]})
    s = ingest.system_from_atoms(atoms, pl)
    assert s.n_spins == 3
    # CA at (0.1458, 0, 0) nm rotated by 90 deg about z, then lifted by 2 nm
    assert np.allclose(s.positions[0], [0.0, 0.1458, 2.0], atol=1e-12)
    assert s.omega_L == pytest.approx(1e6)


def test_placement_rejects_unknown_and_non_orthogonal():
    with pytest.raises(ingest.ParseError):
        ingest.placement_from_dict({"bogus": 1})
    with pytest.raises(ingest.ParseError):
        ingest.placement_from_dict({"rotation": {"matrix": [[2, 0, 0], [0, 1, 0], [0, 0, 1]]}})


def test_spin_list(tmp_path):
    data = [{"label": "h1", "species": "1H", "position_nm": [0, 0, 2]}]
    p = tmp_path / "spins.json"
    p.write_text(json.dumps(data))
    s = ingest.load_system(p, ingest.Placement(nv=NvConfig.for_larmor(2e6)))
    assert s.labels == ["h1"] and s.b[0] == 0.0
    with pytest.raises(ingest.ParseError):
        ingest.parse_spin_list('[{"position_nm": [1, 2]}]')
    with pytest.raises(ingest.ParseError):
        ingest.parse_spin_list("{nope")


def test_bundled_site():
    atoms = ingest.read_pdb(ingest.cxcr4_site_path())
    carbons = ingest.select_atoms(atoms, elements=["C"])
    assert len(carbons) == 12
    assert {a.res_name for a in carbons} == {"ARG", "ILE"}
    s = ingest.load_cxcr4_site()
    assert s.n_spins == 12
    assert s.omega_L == pytest.approx(2e6)
    assert s.nv.depth == 1.75
    lab = s.nv.to_lab_frame(s.positions)
    assert lab[:, 2].min() > s.nv.depth
