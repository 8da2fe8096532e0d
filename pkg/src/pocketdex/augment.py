"""Homolog-based pocket augmentation and conformer jitter.

Homologs arrive as structures plus a residue correspondence to the original
protein. Residue anchors are per-residue atom centroids (the atoms table has
no atom names). A candidate is accepted when its per-residue confidence,
TM-score and pocket alignment rate all clear their thresholds; accepted
homologs are superposed on the original and a new pocket is cut around the
ligand.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .chemio import RigidTransform, Structure, TokenizedEntity, extract_pocket, pairwise_distances
from .errors import DegenerateInputError, EmptyPocketError, MissingAnnotationError

PLDDT_CUTOFF = 0.7
PLDDT_SHARE = 0.90
TM_MIN = 0.4
ALIGN_RATE_MIN = 0.40
ALIGN_DISTANCE = 5.0
POCKET_RADIUS = 6.0


# -- superposition -------------------------------------------------
def kabsch_superpose(a, b) -> tuple[RigidTransform, float]:
    """Rotation + translation minimizing sum |R a_i + t - b_i|^2, and the rmsd."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if a.shape != b.shape:
        raise ValueError(f"point counts differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 3:
        raise DegenerateInputError("superposition needs at least 3 points")
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    A, B = a - ca, b - cb
    for pts, name in ((A, "source"), (B, "target")):
        s = np.linalg.svd(pts, compute_uv=False)
        if s[0] == 0.0 or s[1] <= 1e-9 * s[0]:
            raise DegenerateInputError(f"{name} points are coincident or collinear")
    u, _, vt = np.linalg.svd(A.T @ B)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    R = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = cb - R @ ca
    resid = A @ R.T - B
    rmsd = math.sqrt(float((resid * resid).sum()) / a.shape[0])
    return RigidTransform(R, t), rmsd


def rmsd_under(transform: RigidTransform, a, b) -> float:
    diff = transform.apply(a) - np.asarray(b, dtype=np.float64)
    return math.sqrt(float((diff * diff).sum()) / len(diff))


def tm_d0(L_target: int) -> float:
    return 1.24 * (L_target - 15) ** (1.0 / 3.0) - 1.8


def tm_score(distances, L_target: int) -> float:
    """(1/L) sum_i 1 / (1 + (d_i/d0)^2), d0 = 1.24 (L-15)^(1/3) - 1.8."""
    if L_target < 16:
        raise ValueError(f"TM-score needs L_target >= 16, got {L_target}")
    d = np.asarray(distances, dtype=np.float64).reshape(-1)
    if np.any(d < 0) or np.any(np.isnan(d)):
        raise ValueError("distances must be non-negative")
    if d.size > L_target:
        raise ValueError("more aligned pairs than target residues")
    # d0 drops to ~0.3 A at L=16; the floor keeps short chains from being
    # scored on sub-angstrom noise.
    d0 = max(tm_d0(L_target), 0.5)
    return float(np.sum(1.0 / (1.0 + (d / d0) ** 2)) / L_target)


# -- candidates -------------------------------------------------
def residue_anchors(s: Structure) -> dict[int, np.ndarray]:
    """Centroid of each residue's atoms, keyed by residue index."""
    if "residue_index" not in s.annotations:
        raise MissingAnnotationError("structure has no residue_index annotation")
    res = s.annotations["residue_index"]
    return {int(r): s.coords[res == r].mean(axis=0) for r in np.unique(res)}


def pocket_residues(protein: Structure, ligand: Structure, radius: float = POCKET_RADIUS) -> frozenset[int]:
    """Residues with at least one atom within ``radius`` of the ligand."""
    if "residue_index" not in protein.annotations:
        raise MissingAnnotationError("protein has no residue_index annotation")
    near = pairwise_distances(protein.coords, ligand.coords).min(axis=1) <= radius
    return frozenset(int(r) for r in protein.annotations["residue_index"][near])


@dataclass(frozen=True, eq=False)
class HomologCandidate:
    homolog: Structure
    original: Structure
    correspondence: tuple[tuple[int, int], ...]  # (original residue, homolog residue)
    pocket: frozenset[int]
    name: str = "homolog"

    def __post_init__(self):
        pairs = tuple((int(o), int(h)) for o, h in self.correspondence)
        object.__setattr__(self, "correspondence", pairs)
        object.__setattr__(self, "pocket", frozenset(int(r) for r in self.pocket))
        if "plddt" not in self.homolog.annotations:
            raise MissingAnnotationError("homolog has no plddt annotation")
        for s, who in ((self.homolog, "homolog"), (self.original, "original")):
            if "residue_index" not in s.annotations:
                raise MissingAnnotationError(f"{who} has no residue_index annotation")
        origs = [o for o, _ in pairs]
        homs = [h for _, h in pairs]
        if len(set(origs)) != len(origs) or len(set(homs)) != len(homs):
            raise ValueError("residue correspondence must be one-to-one")
        orig_res = set(self.original.annotations["residue_index"].tolist())
        hom_res = set(self.homolog.annotations["residue_index"].tolist())
        if not set(origs) <= orig_res:
            raise ValueError(f"correspondence names original residues not in the structure: {sorted(set(origs) - orig_res)[:5]}")
        if not set(homs) <= hom_res:
            raise ValueError(f"correspondence names homolog residues not in the structure: {sorted(set(homs) - hom_res)[:5]}")
        if not self.pocket <= orig_res:
            raise ValueError("pocket residues must belong to the original structure")

    def anchor_pairs(self, restrict: frozenset[int] | None = None):
        ho, hh = residue_anchors(self.original), residue_anchors(self.homolog)
        pairs = [(o, h) for o, h in self.correspondence if restrict is None or o in restrict]
        orig = np.array([ho[o] for o, _ in pairs]).reshape(-1, 3)
        hom = np.array([hh[h] for _, h in pairs]).reshape(-1, 3)
        return [o for o, _ in pairs], hom, orig


@dataclass(frozen=True)
class FilterScores:
    plddt_share: float
    tm_score: float
    alignment_rate: float

    def as_dict(self) -> dict[str, float]:
        return {"plddt_share": self.plddt_share, "tm_score": self.tm_score, "alignment_rate": self.alignment_rate}


def passes_thresholds(scores: FilterScores) -> bool:
    """Confidence share must exceed its bar; TM and alignment rate may equal theirs."""
    return scores.plddt_share > PLDDT_SHARE and scores.tm_score >= TM_MIN and scores.alignment_rate >= ALIGN_RATE_MIN


def plddt_share(homolog: Structure) -> float:
    """Fraction of residues whose mean per-atom plddt exceeds the cutoff."""
    if "plddt" not in homolog.annotations:
        raise MissingAnnotationError("homolog has no plddt annotation")
    plddt = homolog.annotations["plddt"]
    res = homolog.annotations["residue_index"]
    means = np.array([plddt[res == r].mean() for r in np.unique(res)])
    return float(np.mean(means > PLDDT_CUTOFF)) if means.size else 0.0


def score_candidate(c: HomologCandidate) -> FilterScores:
    share = plddt_share(c.homolog)
    L = len(np.unique(c.original.annotations["residue_index"]))
    origs, hom, orig = c.anchor_pairs()
    try:
        t, _ = kabsch_superpose(hom, orig)
    except DegenerateInputError:
        return FilterScores(share, 0.0, 0.0)
    d = np.linalg.norm(t.apply(hom) - orig, axis=1)
    tm = tm_score(d, L)
    if c.pocket:
        close = {o for o, di in zip(origs, d) if di <= ALIGN_DISTANCE}
        rate = len(close & c.pocket) / len(c.pocket)
    else:
        rate = 0.0
    return FilterScores(share, tm, rate)


def homoaug_filter(c: HomologCandidate) -> tuple[bool, FilterScores]:
    scores = score_candidate(c)
    return passes_thresholds(scores), scores


# -- augmented pairs -------------------------------------------------
@dataclass(frozen=True, eq=False)
class AugmentedPair:
    pocket: Structure
    ligand: Structure
    provenance: Mapping[str, object] = field(default_factory=dict)


def superpose_homolog(c: HomologCandidate) -> Structure:
    """Homolog moved onto the original, anchored on pocket residues when
    there are enough of them, otherwise on every corresponded residue."""
    _, hom, orig = c.anchor_pairs(c.pocket)
    try:
        t, _ = kabsch_superpose(hom, orig)
    except DegenerateInputError:
        _, hom, orig = c.anchor_pairs()
        t, _ = kabsch_superpose(hom, orig)
    return c.homolog.with_coords(t.apply(c.homolog.coords))


def make_augmented_pair(c: HomologCandidate, ligand: Structure, scores: FilterScores | None = None) -> AugmentedPair:
    moved = superpose_homolog(c)
    pocket = extract_pocket(moved, ligand, POCKET_RADIUS)
    if len(pocket) == 0:
        raise EmptyPocketError(f"{c.name}: no homolog atoms within {POCKET_RADIUS} A of the ligand")
    prov = {"source": c.name}
    if scores is not None:
        prov.update(scores.as_dict())
    return AugmentedPair(pocket, ligand, prov)


def process_candidate(c: HomologCandidate, ligand: Structure) -> tuple[dict, AugmentedPair | None]:
    """Filter then build; returns a log record and the pair if one was made."""
    accept, scores = homoaug_filter(c)
    record = {"candidate": c.name, **scores.as_dict()}
    if not accept:
        return {**record, "status": "rejected"}, None
    try:
        pair = make_augmented_pair(c, ligand, scores)
    except EmptyPocketError:
        return {**record, "status": "empty_pocket"}, None
    return {**record, "status": "accepted", "pocket_atoms": len(pair.pocket)}, pair


def read_correspondence(text: str) -> list[tuple[int, int]]:
    body = "\n".join(line for line in text.splitlines() if line.strip() and not line.lstrip().startswith("#"))
    reader = csv.reader(io.StringIO(body))
    header = [h.strip().lower() for h in next(reader, [])]
    if header != ["orig_residue", "homolog_residue"]:
        raise ValueError(f"expected header orig_residue,homolog_residue, got {','.join(header)}")
    pairs = []
    for n, row in enumerate(reader, start=2):
        if len(row) != 2:
            raise ValueError(f"line {n}: expected 2 fields")
        try:
            pairs.append((int(row[0]), int(row[1])))
        except ValueError:
            raise ValueError(f"line {n}: residue numbers must be integers") from None
    return pairs


# -- conformer stand-in -------------------------------------------------
def _jitter_points(points: np.ndarray, sigma: float, rng: np.random.Generator, rigid: bool) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    noisy = points + rng.normal(0.0, sigma, size=points.shape) if sigma > 0 else points.copy()
    if not rigid:
        return noisy
    # rotate about the centroid so the molecule stays put on average
    t = RigidTransform.random(rng, translation_scale=0.0)
    c = noisy.mean(axis=0)
    return (noisy - c) @ t.rotation.T + c


def jitter_conformer(mol: Structure, sigma: float, seed, rigid: bool = True) -> Structure:
    """Gaussian per-atom displacement, then (optionally) a random rotation."""
    rng = np.random.default_rng(seed)
    return mol.with_coords(_jitter_points(mol.coords, sigma, rng, rigid))


def jitter_entity(entity: TokenizedEntity, sigma: float, seed, rigid: bool = True) -> TokenizedEntity:
    """Same as :func:`jitter_conformer` on a tokenized molecule; the [CLS]
    coordinate follows the new centroid and padding is left alone."""
    rng = np.random.default_rng(seed)
    real = np.flatnonzero(entity.mask)
    real = real[real != entity.cls_index]
    coords = entity.coords.copy()
    coords[real] = _jitter_points(coords[real], sigma, rng, rigid)
    coords[entity.cls_index] = coords[real].mean(axis=0)
    return entity.replace(coords=coords)
