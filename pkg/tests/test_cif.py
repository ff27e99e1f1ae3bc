from __future__ import annotations

import re

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crystalgfn.checkpoint import CheckpointError, load_arrays, save_arrays
from crystalgfn.cif import CifError, export_cif, parse_cif, source_space_group
from crystalgfn.crystal import CrystalStructure, Lattice
from crystalgfn.spacegroup import expand_structure, project_lattice
from helpers import random_structure


def _wrapped_close(a, b, tol):
    d = np.abs(a - b)
    return np.all(np.minimum(d, 1 - d) <= tol)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_cif_round_trip(seed):
    s = random_structure(np.random.default_rng(seed), 8)
    back = parse_cif(export_cif(s, symmetry=seed % 230 + 1))
    np.testing.assert_allclose(back.lattice.params, s.lattice.params, atol=1e-9)
    np.testing.assert_array_equal(back.species, s.species)
    assert _wrapped_close(back.frac, s.frac, 1e-9)


def test_one_atom_gives_one_site_row():
    s = CrystalStructure(Lattice.cubic(4.0), [3], [[0.1, 0.2, 0.3]])
    text = export_cif(s)
    rows = [l for l in text.splitlines() if re.match(r"^Li\d+ ", l)]
    assert len(rows) == 1


def test_coordinates_have_at_least_nine_significant_digits():
    s = CrystalStructure(Lattice.cubic(4.0), [3], [[0.123456789123, 0.2, 0.3]])
    row = next(l for l in export_cif(s).splitlines() if l.startswith("Li1"))
    x = row.split()[2]
    assert len(x.replace("0.", "", 1).lstrip("0")) >= 9
    assert float(x) == pytest.approx(0.123456789123, abs=1e-12)


def test_coordinate_reduced_mod_one():
    text = export_cif(CrystalStructure(Lattice.cubic(4.0), [8], [[0.0, 0.0, 0.0]])).replace(
        "O1 O 0.000000000000", "O1 O 1.250000000000")
    assert parse_cif(text).frac[0, 0] == pytest.approx(0.25)


def test_missing_field_is_named():
    text = export_cif(CrystalStructure(Lattice.cubic(4.0), [8], [[0, 0, 0]]))
    text = "\n".join(l for l in text.splitlines() if not l.startswith("_cell_length_a"))
    with pytest.raises(CifError, match="_cell_length_a"):
        parse_cif(text)


def test_malformed_number_reports_line():
    text = export_cif(CrystalStructure(Lattice.cubic(4.0), [8], [[0, 0, 0]])).replace("_cell_length_b 4.000000000000", "_cell_length_b 4.0x")
    with pytest.raises(CifError, match=r"line \d+: malformed number"):
        parse_cif(text)


def test_unknown_element_reports_line():
    text = export_cif(CrystalStructure(Lattice.cubic(4.0), [8], [[0, 0, 0]])).replace("O1 O ", "Q1 Q ")
    with pytest.raises(CifError, match=r"line \d+: unknown element"):
        parse_cif(text)


def test_symmetry_operations_in_file_are_applied():
    text = """data_test
_cell_length_a 4.0
_cell_length_b 4.0
_cell_length_c 6.0(2)
_cell_angle_alpha 90
_cell_angle_beta 90
_cell_angle_gamma 90
loop_
_space_group_symop_operation_xyz
'x, y, z'
'-x, -y, z+1/2'
loop_
_atom_site_label
_atom_site_fract_x
_atom_site_fract_y
_atom_site_fract_z
O1 0 0 0
Li1 0.25 0.25 0.1
"""
    s = parse_cif(text)
    assert s.lattice.c == 6.0
    assert len(s) == 4
    assert sorted(s.species.tolist()) == [3, 3, 8, 8]
    sites = {(int(z), tuple(np.round(f, 9))) for z, f in zip(s.species, s.frac)}
    assert sites == {(8, (0, 0, 0)), (8, (0, 0, 0.5)), (3, (0.25, 0.25, 0.1)), (3, (0.75, 0.75, 0.6))}


def test_source_group_tag():
    s = expand_structure([(8, (0, 0, 0))], 131, project_lattice(Lattice(4, 4, 6, 90, 90, 90), 131))
    text = export_cif(s, symmetry=131)
    assert source_space_group(text) == 131
    assert source_space_group(export_cif(s)) is None
    assert len(parse_cif(text)) == 2


# -- checkpoint container ----------------------------------------------------------

def test_checkpoint_round_trip_preserves_shapes(tmp_path):
    arrays = {"w": np.arange(6.0).reshape(2, 3), "logZ": np.array(1.5), "v": np.zeros(0)}
    save_arrays(tmp_path / "x.ckpt", arrays, {"note": "hi"})
    back, meta = load_arrays(tmp_path / "x.ckpt")
    assert meta == {"note": "hi"}
    for k, v in arrays.items():
        assert back[k].shape == v.shape
        np.testing.assert_array_equal(back[k], v)


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError, match="magic"):
        load_arrays(p)
