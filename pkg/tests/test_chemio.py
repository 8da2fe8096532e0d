import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pocketdex.chemio import (
    DEFAULT_VOCAB,
    ParseError,
    RigidTransform,
    Structure,
    apply_rigid_transform,
    extract_pocket,
    format_atoms_table,
    format_xyz,
    pad_batch,
    pairwise_distances,
    parse_atoms_table,
    parse_xyz,
    read_structure,
    tokenize,
)

coords_st = hnp.arrays(np.float64, st.tuples(st.integers(1, 12), st.just(3)), elements=st.floats(-50, 50))


def structure_from(coords, elements=("C", "N", "O", "S")):
    return Structure(tuple(elements[i % len(elements)] for i in range(len(coords))), coords)


# -- XYZ -------------------------------------------------
def test_xyz_single_atom():
    s = parse_xyz("1\n\nC 0 0 0")
    assert s.elements == ("C",)
    np.testing.assert_array_equal(s.coords, [[0.0, 0.0, 0.0]])


def test_xyz_order_preserved():
    s = parse_xyz("2\n\nC 0 0 0\nN 1 0 0")
    assert s.elements == ("C", "N")
    np.testing.assert_array_equal(s.coords[1], [1.0, 0.0, 0.0])


def test_xyz_count_mismatch_names_line_3():
    with pytest.raises(ParseError, match="line 3") as exc:
        parse_xyz("3\n\nC 0 0 0\nN 1 0 0")
    assert exc.value.line == 3


@pytest.mark.parametrize(
    "text, line",
    [("", 1), ("x\n\nC 0 0 0", 1), ("1\n\nC 0 zero 0", 3), ("2\n\nC 0 0 0\nN 1 nan 0", 4)],
)
def test_xyz_errors_report_line(text, line):
    with pytest.raises(ParseError) as exc:
        parse_xyz(text)
    assert exc.value.line == line


def test_xyz_strips_free_ions_by_default():
    s = parse_xyz("3\n\nC 0 0 0\nNa 9 9 9\nCl 20 0 0")
    assert s.elements == ("C",)
    kept = parse_xyz("3\n\nC 0 0 0\nNa 9 9 9\nCl 20 0 0", strip_solvent=False)
    assert len(kept) == 3


def test_bonded_halogen_is_kept():
    s = parse_xyz("2\n\nC 0 0 0\nCl 1.75 0 0")
    assert s.elements == ("C", "Cl")


def test_hydrogen_flag():
    text = "2\n\nC 0 0 0\nH 1.1 0 0"
    assert len(parse_xyz(text)) == 2
    assert parse_xyz(text, keep_hydrogens=False).elements == ("C",)


# -- atoms table -------------------------------------------------
def test_atoms_table_minimal():
    s = parse_atoms_table("element,x,y,z\nO,1,2,3")
    assert s.elements == ("O",)
    np.testing.assert_array_equal(s.coords, [[1.0, 2.0, 3.0]])
    assert dict(s.annotations) == {}


def test_atoms_table_plddt_stored():
    s = parse_atoms_table("element,x,y,z,plddt\nC,0,0,0,0.93")
    assert s.annotations["plddt"][0] == pytest.approx(0.93)


def test_atoms_table_plddt_percent_scale_normalised():
    s = parse_atoms_table("element,x,y,z,plddt\nC,0,0,0,93\nN,1,0,0,50")
    np.testing.assert_allclose(s.annotations["plddt"], [0.93, 0.50])


def test_atoms_table_residue_column():
    s = parse_atoms_table("element,x,y,z,residue\nC,0,0,0,7\nN,1,0,0,8")
    np.testing.assert_array_equal(s.annotations["residue_index"], [7, 8])


def test_atoms_table_missing_columns():
    with pytest.raises(ParseError, match="y,z"):
        parse_atoms_table("element,x\nC,1")


@pytest.mark.parametrize("row", ["C,0,0,inf", "C,0,0,abc", "C,0,0"])
def test_atoms_table_bad_rows(row):
    with pytest.raises(ParseError, match="line 2"):
        parse_atoms_table("element,x,y,z\n" + row)


def test_atoms_table_water_stripped_by_resname():
    text = "element,x,y,z,resname\nC,0,0,0,LIG\nO,5,5,5,HOH\nN,1,0,0,LIG"
    assert parse_atoms_table(text).elements == ("C", "N")


def test_unknown_element_is_kept_as_unk():
    s = parse_xyz("1\n\nXx 0 0 0")
    assert tokenize(s).type_ids[1] == DEFAULT_VOCAB.unk_id


@given(coords_st)
def test_writers_round_trip(coords):
    s = structure_from(coords)
    back = parse_xyz(format_xyz(s), strip_solvent=False)
    assert back.elements == s.elements
    np.testing.assert_allclose(back.coords, s.coords, atol=1e-6)
    ann = Structure(s.elements, s.coords, {"plddt": np.linspace(0, 1, len(s)), "residue_index": np.arange(len(s))})
    back = parse_atoms_table(format_atoms_table(ann), strip_solvent=False)
    np.testing.assert_allclose(back.coords, s.coords, atol=1e-6)
    np.testing.assert_allclose(back.annotations["plddt"], ann.annotations["plddt"], atol=1e-6)
    np.testing.assert_array_equal(back.annotations["residue_index"], ann.annotations["residue_index"])


def test_read_structure_dispatches_on_extension(tmp_path):
    (tmp_path / "a.xyz").write_text("1\n\nC 1 2 3\n")
    (tmp_path / "b.csv").write_text("element,x,y,z\nN,4,5,6\n")
    assert read_structure(tmp_path / "a.xyz").elements == ("C",)
    assert read_structure(tmp_path / "b.csv").elements == ("N",)


def test_structure_is_immutable():
    s = structure_from(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        s.coords[0, 0] = 1.0


# -- pocket extraction -------------------------------------------------
def test_pocket_threshold():
    ligand = Structure(("C",), np.zeros((1, 3)))
    protein = Structure(("N", "O"), np.array([[5.9, 0, 0], [6.1, 0, 0]]))
    pocket = extract_pocket(protein, ligand, 6.0)
    np.testing.assert_array_equal(pocket.coords, [[5.9, 0, 0]])


def test_pocket_radius_zero_is_inclusive():
    ligand = Structure(("C",), np.array([[1.0, 2.0, 3.0]]))
    protein = Structure(("N", "O"), np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.1]]))
    assert len(extract_pocket(protein, ligand, 0.0)) == 1


def test_pocket_empty_result_is_empty_structure():
    ligand = Structure(("C",), np.zeros((1, 3)))
    protein = Structure(("N",), np.array([[50.0, 0, 0]]))
    assert len(extract_pocket(protein, ligand)) == 0


def test_pocket_matches_double_loop(rng):
    protein = Structure(("C",) * 50, rng.uniform(-10, 10, (50, 3)), {"residue_index": np.arange(50)})
    ligand = Structure(("C",) * 5, rng.uniform(-3, 3, (5, 3)))
    keep = []
    for i, p in enumerate(protein.coords):
        if any(np.sqrt(sum((p[k] - l[k]) ** 2 for k in range(3))) <= 6.0 for l in ligand.coords):
            keep.append(i)
    pocket = extract_pocket(protein, ligand)
    np.testing.assert_array_equal(pocket.annotations["residue_index"], keep)


@given(coords_st, coords_st, st.floats(0, 20))
def test_pocket_is_subsequence(pc, lc, radius):
    protein = Structure(("C",) * len(pc), pc, {"residue_index": np.arange(len(pc))})
    pocket = extract_pocket(protein, structure_from(lc), radius)
    idx = pocket.annotations["residue_index"]
    assert np.all(np.diff(idx) > 0)
    np.testing.assert_array_equal(pocket.coords, protein.coords[idx])


# -- tokenize -------------------------------------------------
def test_tokenize_centroid():
    e = tokenize(Structure(("C", "C"), np.array([[0.0, 0, 0], [2.0, 0, 0]])))
    np.testing.assert_array_equal(e.coords[0], [1.0, 0.0, 0.0])
    assert e.type_ids[0] == DEFAULT_VOCAB.cls_id


def test_tokenize_length_and_mask():
    e = tokenize(structure_from(np.arange(15.0).reshape(5, 3)))
    assert len(e) == 6 and e.mask.all() and e.n_atoms == 5


def test_pad_batch_shapes():
    a = tokenize(structure_from(np.zeros((2, 3))))
    b = tokenize(structure_from(np.ones((4, 3))))
    ids, coords, mask = pad_batch([a, b])
    assert ids.shape == (2, 5) and coords.shape == (2, 5, 3)
    assert mask.sum(axis=1).tolist() == [3, 5]
    assert ids[0, 3] == DEFAULT_VOCAB.pad_id


# -- rigid transforms -------------------------------------------------
def test_identity_transform():
    s = structure_from(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(apply_rigid_transform(s, RigidTransform.identity()).coords, s.coords)


def test_translation():
    s = Structure(("C",), np.array([[1.0, 2.0, 3.0]]))
    t = RigidTransform(np.eye(3), np.array([10.0, 0, 0]))
    np.testing.assert_array_equal(apply_rigid_transform(s, t).coords, [[11.0, 2.0, 3.0]])


@pytest.mark.parametrize("rot", [np.diag([1.0, 1.0, -1.0]), np.eye(3) * 1.1])
def test_rejects_improper_rotation(rot):
    with pytest.raises(ValueError):
        RigidTransform(rot, np.zeros(3))


@given(coords_st, st.integers(0, 2**31 - 1))
def test_rigid_transform_preserves_distances(coords, seed):
    s = structure_from(coords)
    t = RigidTransform.random(np.random.default_rng(seed), 25.0)
    moved = apply_rigid_transform(s, t)
    np.testing.assert_allclose(pairwise_distances(moved.coords, moved.coords), pairwise_distances(coords, coords), atol=1e-9)
    a, b = tokenize(s), tokenize(moved)
    np.testing.assert_array_equal(a.type_ids, b.type_ids)
    np.testing.assert_array_equal(a.mask, b.mask)
