"""Similarity functions, the two-sided contrastive loss, auxiliary losses and
input corruption.

Loss functions accept either numpy arrays (returning floats) or
:class:`~pocketdex.autograd.Tensor` objects (returning tensors, for training).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .chemio import DEFAULT_VOCAB, Structure, TokenizedEntity, Vocab, pairwise_distances


class SimilarityMetric(enum.IntEnum):
    DOT = 0
    COSINE = 1

    @classmethod
    def parse(cls, value) -> "SimilarityMetric":
        if isinstance(value, cls):
            return value
        if isinstance(value, int):
            return cls(value)
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ValueError(f"unknown similarity metric {value!r} (dot or cosine)") from None


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.07
    metric: SimilarityMetric = SimilarityMetric.COSINE
    topk_weight: float = 0.0
    topk_k: int = 4
    topk_layer: str = "second_last"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.topk_weight < 0:
            raise ValueError("topk_weight must be non-negative")
        if self.topk_k < 1:
            raise ValueError("topk K must be positive")
        if self.topk_layer not in ("last", "second_last"):
            raise ValueError("topk_layer must be 'last' or 'second_last'")
        object.__setattr__(self, "metric", SimilarityMetric.parse(self.metric))


@dataclass(frozen=True)
class CorruptionConfig:
    fraction: float = 0.15
    noise_range: float = 1.0
    mask_fraction: float = 0.15

    def __post_init__(self):
        for name in ("fraction", "mask_fraction"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.noise_range < 0:
            raise ValueError("noise_range must be non-negative")


# -- similarity -------------------------------------------------
def _check_vec(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")


def similarity(a, b, metric=SimilarityMetric.DOT) -> float:
    metric = SimilarityMetric.parse(metric)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_vec(a, b)
    if metric is SimilarityMetric.DOT:
        return float(a @ b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.clip((a / na) @ (b / nb), -1.0, 1.0))


def normalize_rows(x):
    """Unit-normalize the last axis; works for arrays and tensors."""
    if isinstance(x, Tensor):
        return x / (x * x).sum(axis=-1, keepdims=True).sqrt()
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cosine similarity of a zero vector")
    return x / norms


def similarity_matrix(pockets, mols, metric=SimilarityMetric.DOT):
    """``S[i, j] = s(pocket_i, mol_j)``."""
    metric = SimilarityMetric.parse(metric)
    tensor = isinstance(pockets, Tensor) or isinstance(mols, Tensor)
    if tensor:
        P, M = ag.as_tensor(pockets), ag.as_tensor(mols)
    else:
        P, M = np.asarray(pockets, dtype=np.float64), np.asarray(mols, dtype=np.float64)
    if P.shape[0] != M.shape[0]:
        raise ValueError(f"count mismatch: {P.shape[0]} pockets vs {M.shape[0]} molecules")
    if P.shape[1] != M.shape[1]:
        raise ValueError(f"dimension mismatch: {P.shape[1]} vs {M.shape[1]}")
    if metric is SimilarityMetric.COSINE:
        P, M = normalize_rows(P), normalize_rows(M)
    return P @ M.swapaxes(0, 1) if tensor else P @ M.T


# -- contrastive losses -------------------------------------------------
def _rowwise_losses(S: Tensor, tau: float) -> Tensor:
    """-(1/N) log softmax(S / tau) on the diagonal, one value per row."""
    n = S.shape[0]
    logp = ag.log_softmax(S * (1.0 / tau), axis=1)
    eye = np.eye(n, dtype=bool)
    return -(logp * eye.astype(np.float64)).sum(axis=1) * (1.0 / n)


def _out(x: Tensor, tensor_in: bool):
    return x if tensor_in else float(x.data) if x.data.ndim == 0 else x.data.copy()


def _square(S):
    t = isinstance(S, Tensor)
    S = ag.as_tensor(S) if t else Tensor(np.asarray(S, dtype=np.float64))
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] < 1:
        raise ValueError("similarity matrix must be square and non-empty")
    return S, t


def pocket_to_mol_losses(S, tau: float):
    """All per-pocket terms: rank each pocket's own molecule above the others."""
    S, t = _square(S)
    return _out(_rowwise_losses(S, tau), t)


def mol_to_pocket_losses(S, tau: float):
    """All per-molecule terms (softmax down each column)."""
    S, t = _square(S)
    return _out(_rowwise_losses(S.swapaxes(0, 1), tau), t)


def pocket_to_mol_loss(S, k: int, tau: float):
    S, t = _square(S)
    return _out(_rowwise_losses(S, tau)[k], t)


def mol_to_pocket_loss(S, k: int, tau: float):
    S, t = _square(S)
    return _out(_rowwise_losses(S.swapaxes(0, 1), tau)[k], t)


def drugclip_loss(S, tau: float):
    """(1/2) * sum_k (pocket-to-mol_k + mol-to-pocket_k)."""
    S, t = _square(S)
    total = (_rowwise_losses(S, tau).sum() + _rowwise_losses(S.swapaxes(0, 1), tau).sum()) * 0.5
    return _out(total, t)


# -- top-k / top-k atom interaction -------------------------------------------------
def _topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores; ties go to the lower index."""
    order = np.lexsort((np.arange(scores.size), -scores))
    return np.sort(order[:k])


def topk_topk_loss(mol_atoms, pocket_atoms, k: int):
    """Sum of cosine similarities between the top-k molecule atoms and the
    top-k pocket atoms, where an atom's rank is its best cosine match on the
    other side. Larger is better; the trainer subtracts it."""
    t = isinstance(mol_atoms, Tensor) or isinstance(pocket_atoms, Tensor)
    Mt = ag.as_tensor(mol_atoms) if t else Tensor(np.asarray(mol_atoms, dtype=np.float64))
    Pt = ag.as_tensor(pocket_atoms) if t else Tensor(np.asarray(pocket_atoms, dtype=np.float64))
    lm, lp = Mt.shape[0], Pt.shape[0]
    if k < 1 or k > min(lm, lp):
        raise ValueError(f"K={k} too large for {lm} molecule and {lp} pocket atoms")
    C = normalize_rows(Mt) @ normalize_rows(Pt).swapaxes(0, 1)  # [Lm, Lp]
    sel_m = _topk_indices(C.data.max(axis=1), k)
    sel_p = _topk_indices(C.data.max(axis=0), k)
    block = C[np.ix_(sel_m, sel_p)]
    return _out(block.sum(), t)


def topk_topk_bruteforce(mol_atoms, pocket_atoms, k: int) -> float:
    """Reference: pick the k-subsets with the largest total best-match score by
    enumeration, then sum pairwise cosines with explicit loops."""
    M = np.asarray(mol_atoms, dtype=np.float64)
    P = np.asarray(pocket_atoms, dtype=np.float64)

    def cos(u, v):
        return sum(x * y for x, y in zip(u, v)) / math.sqrt(sum(x * x for x in u) * sum(y * y for y in v))

    C = [[cos(m, p) for p in P] for m in M]
    best_m = [max(row) for row in C]
    best_p = [max(C[i][j] for i in range(len(M))) for j in range(len(P))]
    sub_m = max(combinations(range(len(M)), k), key=lambda s: sum(best_m[i] for i in s))
    sub_p = max(combinations(range(len(P)), k), key=lambda s: sum(best_p[j] for j in s))
    return sum(C[i][j] for i in sub_m for j in sub_p)


# -- corruption -------------------------------------------------
def n_selected(fraction: float, n: int) -> int:
    """round_half_up(fraction * n), at least 1 when n >= 1."""
    if n < 1:
        return 0
    # The small guard absorbs representation error such as 0.15 * 10 = 1.4999999.
    return min(n, max(1, math.floor(fraction * n + 0.5 + 1e-9)))


def _real_positions(entity: TokenizedEntity) -> np.ndarray:
    pos = np.flatnonzero(entity.mask)
    return pos[pos != entity.cls_index]


def corrupt_coords(entity: TokenizedEntity, cfg: CorruptionConfig, rng_seed):
    """Shift a random subset of atoms by uniform noise in [-range, range] per
    component. Returns ``(corrupted, indices, true_distances)``; the [CLS]
    coordinate is re-centred on the corrupted atoms."""
    real = _real_positions(entity)
    if real.size < 1:
        raise ValueError("entity has no real atoms")
    rng = np.random.default_rng(rng_seed)
    n = n_selected(cfg.fraction, real.size)
    chosen = np.sort(rng.choice(real, size=n, replace=False))
    noise = rng.uniform(-cfg.noise_range, cfg.noise_range, size=(n, 3))
    coords = entity.coords.copy()
    coords[chosen] += noise
    coords[entity.cls_index] = coords[real].mean(axis=0)
    truth = pairwise_distances(entity.coords, entity.coords)
    return entity.replace(coords=coords), chosen, truth


def mask_types(entity: TokenizedEntity, cfg: CorruptionConfig, rng_seed, vocab: Vocab = DEFAULT_VOCAB):
    """Replace a random subset of non-[CLS] atom types by MASK.
    Returns ``(masked, indices, original_ids_at_indices)``."""
    real = _real_positions(entity)
    if real.size < 1:
        raise ValueError("entity has no real atoms")
    rng = np.random.default_rng(rng_seed)
    n = n_selected(cfg.mask_fraction, real.size)
    chosen = np.sort(rng.choice(real, size=n, replace=False))
    ids = entity.type_ids.copy()
    truth = ids[chosen].copy()
    ids[chosen] = vocab.mask_id
    return entity.replace(type_ids=ids), chosen, truth


# -- single-tower contrast -------------------------------------------------
def single_tower_reference_score(pocket: Structure, mol: Structure, sigma: float = 3.0) -> float:
    """Toy cross-distance score sum_ij exp(-|c_i - c_j|^2 / (2 sigma^2)).

    It reads protein-ligand distances directly, so it moves when the ligand
    moves rigidly, unlike a two-tower similarity."""
    if len(pocket) == 0 or len(mol) == 0:
        raise ValueError("empty structure")
    d = pairwise_distances(pocket.coords, mol.coords)
    return float(np.exp(-(d * d) / (2.0 * sigma * sigma)).sum())
