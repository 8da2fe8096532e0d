import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pocketdex import synthetic
from pocketdex.autograd import Tensor
from pocketdex.chemio import DEFAULT_VOCAB, RigidTransform, Structure, apply_rigid_transform, tokenize
from pocketdex.encoder import DualEncoder, encode
from pocketdex.objective import (
    ContrastiveConfig,
    CorruptionConfig,
    SimilarityMetric,
    corrupt_coords,
    drugclip_loss,
    mask_types,
    mol_to_pocket_loss,
    mol_to_pocket_losses,
    n_selected,
    pocket_to_mol_loss,
    pocket_to_mol_losses,
    similarity,
    similarity_matrix,
    single_tower_reference_score,
    topk_topk_bruteforce,
    topk_topk_loss,
)

LN2 = math.log(2.0)
square = st.integers(1, 6).flatmap(
    lambda n: hnp.arrays(np.float64, (n, n), elements=st.floats(-5, 5))
)


def vec(values):
    return np.array(values, dtype=np.float64)


# -- similarity -------------------------------------------------
def test_dot_example():
    assert similarity([1, 2], [3, 4], "dot") == 11.0


def test_cosine_examples():
    assert similarity([0.3, -2.0, 5.0], [0.3, -2.0, 5.0], "cosine") == pytest.approx(1.0)
    assert similarity([1, 0], [0, 1], "cosine") == 0.0


def test_similarity_errors():
    with pytest.raises(ValueError, match="dimension"):
        similarity([1, 2], [1, 2, 3])
    with pytest.raises(ValueError, match="zero"):
        similarity([0, 0], [1, 2], "cosine")


def test_metric_parse():
    assert SimilarityMetric.parse("Cosine") is SimilarityMetric.COSINE
    assert SimilarityMetric.parse(0) is SimilarityMetric.DOT
    with pytest.raises(ValueError):
        SimilarityMetric.parse("l2")


def test_matrix_single_pair():
    p, m = vec([[1.0, 2.0]]), vec([[0.5, -1.0]])
    assert similarity_matrix(p, m)[0, 0] == similarity(p[0], m[0])


def test_matrix_orthonormal_is_identity():
    q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((4, 4)))
    np.testing.assert_allclose(similarity_matrix(q, q, "cosine"), np.eye(4), atol=1e-12)


@pytest.mark.parametrize("metric", ["dot", "cosine"])
def test_matrix_matches_double_loop(metric, rng):
    P, M = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    S = similarity_matrix(P, M, metric)
    for i in range(4):
        for j in range(4):
            assert S[i, j] == pytest.approx(similarity(P[i], M[j], metric), abs=1e-12)


def test_matrix_count_mismatch():
    with pytest.raises(ValueError, match="count"):
        similarity_matrix(np.ones((2, 3)), np.ones((3, 3)))


def test_cosine_scale_invariance(rng):
    P, M = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    scales = rng.uniform(0.1, 10, (5, 1))
    np.testing.assert_allclose(similarity_matrix(P * scales, M, "cosine"), similarity_matrix(P, M, "cosine"), atol=1e-12)


# -- contrastive loss -------------------------------------------------
def test_single_pair_losses_vanish():
    S = vec([[3.7]])
    assert pocket_to_mol_loss(S, 0, 0.07) == 0.0
    assert drugclip_loss(S, 0.07) == 0.0


def test_uniform_two_by_two():
    S = np.full((2, 2), 0.4)
    assert pocket_to_mol_loss(S, 0, 1.0) == pytest.approx(LN2 / 2, abs=1e-12)
    assert mol_to_pocket_loss(S, 1, 1.0) == pytest.approx(LN2 / 2, abs=1e-12)
    assert drugclip_loss(S, 1.0) == pytest.approx(LN2, abs=1e-12)
    assert pocket_to_mol_loss(S, 0, 1.0) == pytest.approx(0.346574, abs=1e-6)


def test_saturated_row():
    S = np.full((3, 3), -10.0)
    np.fill_diagonal(S, 10.0)
    assert pocket_to_mol_loss(S, 1, 1.0) < 1e-8


def test_symmetric_matrix_sides_agree(rng):
    A = rng.standard_normal((5, 5))
    S = A + A.T
    for k in range(5):
        assert mol_to_pocket_loss(S, k, 0.5) == pytest.approx(pocket_to_mol_loss(S, k, 0.5), abs=1e-14)


def test_transpose_identity(rng):
    S = rng.standard_normal((6, 6))
    for k in range(6):
        assert mol_to_pocket_loss(S, k, 0.3) == pytest.approx(pocket_to_mol_loss(S.T, k, 0.3), abs=1e-14)


def _term(S, k, tau):
    """-(1/N) log softmax along row k, by explicit summation."""
    n = len(S)
    top = max(S[k][i] / tau for i in range(n))
    denom = sum(math.exp(S[k][i] / tau - top) for i in range(n))
    return -(S[k][k] / tau - top - math.log(denom)) / n


def test_total_equals_term_by_term_sum(rng):
    S = rng.standard_normal((5, 5))
    T = S.T.tolist()
    expected = 0.5 * sum(_term(S.tolist(), k, 0.07) + _term(T, k, 0.07) for k in range(5))
    assert drugclip_loss(S, 0.07) == pytest.approx(expected, rel=1e-12)


def test_huge_logits_stay_finite():
    S = vec([[1.0, -1.0], [0.5, 1.0]])
    assert math.isfinite(drugclip_loss(S, 1e-4))


def test_rejects_non_square():
    with pytest.raises(ValueError):
        drugclip_loss(np.ones((2, 3)), 1.0)


def test_tensor_input_returns_tensor(rng):
    S = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    out = drugclip_loss(S, 0.5)
    out.backward()
    assert S.grad.shape == (3, 3)


@given(square, st.floats(0.05, 5.0))
def test_loss_non_negative_and_sides_dual(S, tau):
    assert drugclip_loss(S, tau) >= 0.0
    np.testing.assert_allclose(mol_to_pocket_losses(S, tau).sum(), pocket_to_mol_losses(S.T, tau).sum(), rtol=1e-12, atol=1e-12)


@given(square, st.floats(-20, 20), st.integers(0, 5))
def test_row_and_column_shift_invariance(S, c, k):
    k %= len(S)
    rows = S.copy()
    rows[k] += c
    np.testing.assert_allclose(pocket_to_mol_losses(rows, 1.0)[k], pocket_to_mol_losses(S, 1.0)[k], atol=1e-9)
    cols = S.copy()
    cols[:, k] += c
    np.testing.assert_allclose(mol_to_pocket_losses(cols, 1.0)[k], mol_to_pocket_losses(S, 1.0)[k], atol=1e-9)


def test_config_validation():
    with pytest.raises(ValueError):
        ContrastiveConfig(temperature=0.0)
    with pytest.raises(ValueError):
        ContrastiveConfig(topk_k=0)
    assert ContrastiveConfig(metric="dot").metric is SimilarityMetric.DOT
    assert ContrastiveConfig().temperature == 0.07


# -- top-k / top-k -------------------------------------------------
def test_topk_single_atom():
    m, p = vec([[1.0, 2.0, 0.5]]), vec([[-0.3, 1.0, 2.0]])
    assert topk_topk_loss(m, p, 1) == pytest.approx(similarity(m[0], p[0], "cosine"), abs=1e-12)


def test_topk_identical_atoms():
    u = np.tile(vec([0.6, 0.8]), (3, 1))
    assert topk_topk_loss(u, u, 2) == pytest.approx(4.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_topk_matches_exhaustive(seed):
    rng = np.random.default_rng(seed)
    m, p = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    assert topk_topk_loss(m, p, 2) == pytest.approx(topk_topk_bruteforce(m, p, 2), abs=1e-12)


def test_topk_k_too_large():
    with pytest.raises(ValueError, match="too large"):
        topk_topk_loss(np.ones((2, 3)), np.ones((4, 3)), 3)


# -- corruption -------------------------------------------------
@pytest.mark.parametrize("n, expected", [(20, 3), (10, 2), (1, 1), (3, 1), (0, 0), (100, 15)])
def test_selection_count(n, expected):
    assert n_selected(0.15, n) == expected


def entity(n, seed=0):
    return tokenize(synthetic.random_molecule(np.random.default_rng(seed), n))


def test_corrupt_twenty_atoms():
    e = entity(20)
    out, idx, truth = corrupt_coords(e, CorruptionConfig(), 7)
    assert len(idx) == 3 and 0 not in idx
    changed = np.flatnonzero(np.any(out.coords[1:] != e.coords[1:], axis=1)) + 1
    np.testing.assert_array_equal(changed, idx)
    assert np.all(np.abs(out.coords[idx] - e.coords[idx]) <= 1.0)
    np.testing.assert_allclose(out.coords[0], out.coords[1:].mean(axis=0))
    np.testing.assert_allclose(truth, np.linalg.norm(e.coords[:, None] - e.coords[None], axis=-1))


def test_corrupt_zero_range_is_identity():
    e = entity(12)
    out, _, _ = corrupt_coords(e, CorruptionConfig(noise_range=0.0), 1)
    np.testing.assert_array_equal(out.coords, e.coords)


def test_corrupt_deterministic():
    e = entity(15)
    a, b = corrupt_coords(e, CorruptionConfig(), 3), corrupt_coords(e, CorruptionConfig(), 3)
    np.testing.assert_array_equal(a[0].coords, b[0].coords)
    np.testing.assert_array_equal(a[1], b[1])


@settings(max_examples=30)
@given(st.integers(1, 30), st.floats(0.01, 1.0), st.integers(0, 1000))
def test_mask_types_properties(n, fraction, seed):
    e = entity(n, seed)
    cfg = CorruptionConfig(mask_fraction=fraction)
    out, idx, truth = mask_types(e, cfg, seed)
    assert len(idx) == n_selected(fraction, n)
    assert 0 not in idx
    assert np.all(out.type_ids[idx] == DEFAULT_VOCAB.mask_id)
    rebuilt = out.type_ids.copy()
    rebuilt[idx] = truth
    np.testing.assert_array_equal(rebuilt, e.type_ids)


def test_corruption_config_validation():
    with pytest.raises(ValueError):
        CorruptionConfig(fraction=0.0)
    with pytest.raises(ValueError):
        CorruptionConfig(noise_range=-1.0)


# -- single-tower contrast -------------------------------------------------
def one_atom(xyz):
    return Structure(("C",), vec([xyz]))


def test_reference_score_coincident():
    assert single_tower_reference_score(one_atom([1, 2, 3]), one_atom([1, 2, 3])) == 1.0


def test_reference_score_far_away():
    assert single_tower_reference_score(one_atom([0, 0, 0]), one_atom([100, 0, 0])) < 1e-10


def test_two_towers_ignore_translation_single_tower_does_not(small_config):
    rng = np.random.default_rng(11)
    mol = synthetic.random_molecule(rng)
    pocket = synthetic.random_pocket(rng, ligand=mol)
    shifted = apply_rigid_transform(mol, RigidTransform(np.eye(3), vec([10, 0, 0])))
    ref0 = single_tower_reference_score(pocket, mol)
    ref1 = single_tower_reference_score(pocket, shifted)
    assert abs(ref1 - ref0) > 0.1 * ref0
    model = DualEncoder.initialize(small_config, seed=2)
    p = encode(tokenize(pocket), model.pocket)
    s0 = similarity(p, encode(tokenize(mol), model.molecule), "dot")
    s1 = similarity(p, encode(tokenize(shifted), model.molecule), "dot")
    assert abs(s1 - s0) <= 1e-5 * abs(s0)


@settings(max_examples=10)
@given(st.integers(0, 2**31 - 1))
def test_dual_similarity_rigid_invariant(small_config, seed):
    rng = np.random.default_rng(seed)
    mol = synthetic.random_molecule(rng)
    pocket = synthetic.random_pocket(rng, ligand=mol)
    model = DualEncoder.initialize(small_config, seed=1)
    p = encode(tokenize(pocket), model.pocket)
    moved = apply_rigid_transform(mol, RigidTransform.random(rng, 20.0))
    s0 = similarity(p, encode(tokenize(mol), model.molecule))
    s1 = similarity(p, encode(tokenize(moved), model.molecule))
    assert abs(s1 - s0) <= 1e-5 * abs(s0)
