"""Small random structures for demos, tests and benchmarks."""
from __future__ import annotations

import numpy as np

from .chemio import Structure, pairwise_distances, tokenize
from .trainer import PairDataset, PairRecord

MOL_ELEMENTS = ("C", "C", "N", "O", "S", "P", "F", "Cl", "Br")
POCKET_ELEMENTS = ("C", "C", "N", "O", "S")


def random_molecule(rng: np.random.Generator, n_atoms: int | None = None) -> Structure:
    """A self-avoiding-ish chain with 1.5 A steps, centred at the origin."""
    n = int(rng.integers(6, 13)) if n_atoms is None else n_atoms
    pts = [np.zeros(3)]
    while len(pts) < n:
        step = rng.standard_normal(3)
        cand = pts[-1] + 1.5 * step / np.linalg.norm(step)
        if min(np.linalg.norm(cand - p) for p in pts) > 1.2:
            pts.append(cand)
    coords = np.array(pts)
    coords -= coords.mean(axis=0)
    return Structure(tuple(rng.choice(MOL_ELEMENTS, size=n)), coords)


def random_pocket(rng: np.random.Generator, n_atoms: int | None = None, ligand: Structure | None = None) -> Structure:
    """Atoms packed 3.5-5 A around a ligand (a fresh random one if not given),
    grouped four per residue, with plddt 1."""
    n = int(rng.integers(16, 29)) if n_atoms is None else n_atoms
    lig = random_molecule(rng) if ligand is None else ligand
    pts: list[np.ndarray] = []
    while len(pts) < n:
        d = rng.standard_normal(3)
        cand = lig.coords[rng.integers(len(lig))] + rng.uniform(3.5, 5.0) * d / np.linalg.norm(d)
        if pairwise_distances(cand[None], lig.coords).min() < 3.2:
            continue
        if pts and pairwise_distances(cand[None], np.array(pts)).min() < 1.2:
            continue
        pts.append(cand)
    ann = {"residue_index": np.arange(n) // 4 + 1, "plddt": np.ones(n)}
    return Structure(tuple(rng.choice(POCKET_ELEMENTS, size=n)), np.array(pts), ann)


def random_protein(rng: np.random.Generator, n_residues: int = 40, atoms_per_residue: int = 5) -> Structure:
    """A helix-like chain of residues with a few atoms each and plddt 0.9."""
    t = np.arange(n_residues)
    backbone = np.stack([2.3 * np.cos(t * 1.75), 2.3 * np.sin(t * 1.75), 1.5 * t], axis=1)
    backbone += rng.normal(0.0, 0.3, backbone.shape)
    coords = (backbone[:, None, :] + rng.normal(0.0, 0.8, (n_residues, atoms_per_residue, 3))).reshape(-1, 3)
    res = np.repeat(np.arange(1, n_residues + 1), atoms_per_residue)
    elements = tuple(rng.choice(POCKET_ELEMENTS, size=len(coords)))
    return Structure(elements, coords, {"residue_index": res, "plddt": np.full(len(coords), 0.9)})


def random_pairs(n: int, seed: int = 0) -> list[tuple[str, Structure, Structure]]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        mol = random_molecule(rng)
        out.append((f"pair{i:03d}", random_pocket(rng, ligand=mol), mol))
    return out


def random_dataset(n: int, seed: int = 0) -> PairDataset:
    return PairDataset([PairRecord(tokenize(p), tokenize(m), pid) for pid, p, m in random_pairs(n, seed)])
