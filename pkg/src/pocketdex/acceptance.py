"""Executable acceptance checks, shared by the test suite and ``pocketdex selftest``.

Each check returns a :class:`CheckResult`; none of them raise on failure.
"""
from __future__ import annotations

import itertools
import math
import os
import tempfile
import time
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import augment, chemio, encoder, metrics, objective, retrieval, synthetic, trainer
from .errors import BadMagicError, CorruptHeaderError, FormatError, TruncatedFileError, VersionMismatchError


@dataclass(frozen=True)
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.number:2d} {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _run(number: int, name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crash is a failed check, reported with its cause
        ok, detail = False, f"raised {type(exc).__name__}: {exc}\n{traceback.format_exc()}"
    return CheckResult(number, name, bool(ok), detail, time.perf_counter() - t0)


# 1 -------------------------------------------------
def gradients(sample: int = 64, seed: int = 0) -> tuple[bool, str]:
    model = encoder.DualEncoder.initialize(encoder.EncoderConfig(), seed)
    data = synthetic.random_dataset(4, seed)
    batch = [data[i] for i in range(4)]
    cfg = trainer.TrainConfig(topk_weight=1.0, masked_weight=1.0, denoise_weight=1.0, seed=seed)
    t0 = time.perf_counter()
    errs = {c: trainer.gradient_check(model, batch, cfg, 1e-4, sample, c, seed) for c in trainer.COMPONENTS}
    elapsed = time.perf_counter() - t0
    worst = max(errs.values())
    text = ", ".join(f"{c}={e:.1e}" for c, e in errs.items())
    return worst <= 1e-4 and elapsed < 120.0, f"max rel err {worst:.2e} ({text}); {elapsed:.1f}s for {sample} params each"


# 2 -------------------------------------------------
def _random_structure(rng: np.random.Generator) -> chemio.Structure:
    if rng.random() < 0.5:
        return synthetic.random_molecule(rng)
    return synthetic.random_pocket(rng)


def invariance(n: int = 100, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    model = encoder.DualEncoder.initialize(encoder.EncoderConfig(), seed)
    worst = 0.0
    for _ in range(n):
        s = _random_structure(rng)
        tower = model.tower("pocket" if len(s) > 12 else "molecule")
        base = encoder.encode(chemio.tokenize(s), tower)
        moved = chemio.apply_rigid_transform(s, chemio.RigidTransform.random(rng, 20.0))
        moved = moved.select(rng.permutation(len(s)))
        after = encoder.encode(chemio.tokenize(moved), tower)
        worst = max(worst, float(np.linalg.norm(after - base) / np.linalg.norm(base)))
    return worst <= 1e-5, f"max relative embedding change {worst:.2e} over {n} entities"


# 3 -------------------------------------------------
def two_tower_contrast(n: int = 20, shift: float = 10.0, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    model = encoder.DualEncoder.initialize(encoder.EncoderConfig(), seed)
    min_single, max_dual = math.inf, 0.0
    for _ in range(n):
        pocket, mol = synthetic.random_pocket(rng), synthetic.random_molecule(rng)
        d = rng.standard_normal(3)
        moved = mol.with_coords(mol.coords + shift * d / np.linalg.norm(d))
        s0 = objective.single_tower_reference_score(pocket, mol)
        s1 = objective.single_tower_reference_score(pocket, moved)
        min_single = min(min_single, abs(s1 - s0) / abs(s0))
        ep = encoder.encode(chemio.tokenize(pocket), model.pocket)
        d0 = objective.similarity(ep, encoder.encode(chemio.tokenize(mol), model.molecule), "cosine")
        d1 = objective.similarity(ep, encoder.encode(chemio.tokenize(moved), model.molecule), "cosine")
        max_dual = max(max_dual, abs(d1 - d0) / max(abs(d0), 1e-12))
    ok = min_single > 0.10 and max_dual <= 1e-5
    return ok, f"single-tower min change {min_single:.1%}, dual-tower max change {max_dual:.1e}"


# 4 -------------------------------------------------
def contrastive_values() -> tuple[bool, str]:
    one = objective.drugclip_loss(np.array([[0.37]]), 0.07)
    two = objective.drugclip_loss(np.full((2, 2), 0.25), 1.0)
    ok = one == 0.0 and abs(two - math.log(2.0)) <= 1e-12
    return ok, f"N=1 loss {one!r}, N=2 uniform loss - ln2 = {two - math.log(2.0):.1e}"


# 5 -------------------------------------------------
OVERFIT_CONFIG = dict(epochs=200, batch_size=16, lr=1e-3, seed=0)


def overfit(n_pairs: int = 32, seed: int = 0) -> tuple[bool, str]:
    data = synthetic.random_dataset(n_pairs, seed)
    cfg = trainer.TrainConfig(**OVERFIT_CONFIG)
    t0 = time.perf_counter()

    def converged(row, model):
        return row["total"] < 0.05 and trainer.retrieval_top1(model, data, cfg.metric) == 1.0

    result = trainer.fit(data, cfg, config=encoder.EncoderConfig(), stop_when=converged)
    elapsed = time.perf_counter() - t0
    top1 = trainer.retrieval_top1(result.model, data, cfg.metric)
    loss = result.history[-1]["total"]
    ok = top1 == 1.0 and loss < 0.05 and elapsed < 600.0
    return ok, f"top-1 {top1:.0%}, final train loss {loss:.4f}, {len(result.history)} epochs in {elapsed:.0f}s"


# 6 -------------------------------------------------
def _tied_index(count: int, dim: int, seed: int) -> retrieval.EmbeddingIndex:
    rng = np.random.default_rng(seed)
    vecs = rng.standard_normal((count, dim)).astype(np.float32)
    # duplicate a tenth of the rows so equal scores are common
    dup = rng.choice(count, size=count // 10, replace=False)
    vecs[dup] = vecs[rng.choice(count, size=dup.size)]
    ids = [f"m{x:06d}" for x in rng.permutation(count)]
    return retrieval.make_index(vecs, ids, "dot")


def retrieval_exactness(count: int = 10_000, dim: int = 64, n_queries: int = 100, seed: int = 0) -> tuple[bool, str]:
    index = _tied_index(count, dim, seed)
    rng = np.random.default_rng(seed + 1)
    chunk = 1024  # ten chunks, so a 4-way scan really splits the work
    mismatches, shard_diff, ties = 0, 0, 0
    for qi in range(n_queries):
        q = index.vectors[rng.integers(count)] if qi % 2 else rng.standard_normal(dim)
        oracle = retrieval.search_bruteforce(index, q, 100, chunk)
        ties += len(oracle) - len(set(oracle.scores))
        for k in (1, 10, 100):
            single = retrieval.search(index, q, k, 1, chunk)
            sharded = retrieval.search(index, q, k, 4, chunk)
            mismatches += single.entries != oracle.entries[:k]
            shard_diff += sharded.entries != single.entries
    ok = mismatches == 0 and shard_diff == 0 and ties > 0
    return ok, f"{mismatches} oracle mismatches, {shard_diff} shard mismatches, {ties} tied scores exercised"


# 7 -------------------------------------------------
def throughput(count: int = 1_000_000, dim: int = 128, k: int = 100, n_queries: int = 3) -> tuple[bool, str]:
    index = retrieval.random_index(count, dim, "dot", seed=0)
    one = retrieval.throughput_bench(index, n_queries, k, threads=1)
    four = retrieval.throughput_bench(index, n_queries, k, threads=4)
    latency = one.seconds / one.n_queries
    speedup = four.queries_per_sec / one.queries_per_sec
    cores = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count()
    ok = latency <= 2.0 and speedup >= 3.0
    return ok, f"single-thread query {latency:.2f}s, 4-thread speedup {speedup:.2f}x on {cores} available core(s)"


# 8 -------------------------------------------------
def _auroc_pairs(scores, labels) -> float:
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def _ranked(d: metrics.LabeledScores) -> list[bool]:
    order = sorted(range(len(d)), key=lambda i: (-d.scores[i], d.ids[i]))
    return [bool(d.labels[i]) for i in order]


def _bedroc_scalar(ranked: list[bool], alpha: float) -> float:
    N, n = len(ranked), sum(ranked)
    ra = n / N
    s = sum(math.exp(-alpha * (i + 1) / N) for i, y in enumerate(ranked) if y)
    rie = s / (ra * (1 - math.exp(-alpha)) / (math.exp(alpha / N) - 1))
    return rie * ra * math.sinh(alpha / 2) / (math.cosh(alpha / 2) - math.cosh(alpha / 2 - alpha * ra)) + 1 / (
        1 - math.exp(alpha * (1 - ra))
    )


def _ef_count(ranked: list[bool], fraction: float) -> float:
    top = 0
    while top < fraction * len(ranked) - 1e-9:
        top += 1
    return sum(ranked[:top]) / (sum(ranked) * fraction)


def _re_count(ranked: list[bool], fpr: float) -> float:
    decoys = len(ranked) - sum(ranked)
    target = 0
    while target < fpr * decoys - 1e-9:
        target += 1
    tp = fp = 0
    for y in ranked:
        tp += y
        fp += not y
        if fp == target:
            break
    return tp * len(ranked) / (sum(ranked) * target)


def metric_oracles(n: int = 100, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst_auc = worst_bed = 0.0
    count_mismatch = 0
    for _ in range(n):
        size = int(rng.integers(20, 400))
        labels = rng.random(size) < rng.uniform(0.02, 0.3)
        labels[rng.integers(size)] = True
        labels[rng.integers(size)] = False
        # coarse scores so ties appear
        scores = np.round(rng.standard_normal(size) + labels * rng.uniform(0, 2), 1)
        d = metrics.LabeledScores([f"c{i}" for i in rng.permutation(size)], scores, labels)
        ranked = _ranked(d)
        worst_auc = max(worst_auc, abs(metrics.auroc(d) - _auroc_pairs(scores, labels)))
        worst_bed = max(worst_bed, abs(metrics.bedroc(d, 85.0) - _bedroc_scalar(ranked, 85.0)))
        for f in (0.005, 0.01, 0.05):
            count_mismatch += metrics.enrichment_factor(d, f) != _ef_count(ranked, f)
        for f in (0.005, 0.01, 0.02, 0.05):
            count_mismatch += metrics.roc_enrichment(d, f) != _re_count(ranked, f)
    trivial = metrics.LabeledScores([f"c{i:03d}" for i in range(100)], -np.arange(100.0), np.arange(100) < 10)
    ef1 = metrics.enrichment_factor(trivial, 0.01)
    ok = worst_auc <= 1e-12 and worst_bed <= 1e-10 and count_mismatch == 0 and ef1 == 10.0
    return ok, f"AUROC err {worst_auc:.1e}, BEDROC err {worst_bed:.1e}, EF/RE mismatches {count_mismatch}, EF1% trivial {ef1}"


# 9 -------------------------------------------------
def _toy_protein(rng, n_res=30) -> chemio.Structure:
    p = synthetic.random_protein(rng, n_res)
    return chemio.Structure(p.elements, p.coords, {**p.annotations, "plddt": np.ones(len(p))})


def homology(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        a = rng.standard_normal((12, 3)) * 5
        t = chemio.RigidTransform.random(rng, 30.0)
        got, rmsd = augment.kabsch_superpose(a, t.apply(a))
        worst = max(worst, rmsd, np.abs(got.rotation - t.rotation).max(), np.abs(got.translation - t.translation).max())
    kabsch_ok = worst <= 1e-8

    d0 = augment.tm_d0(50)
    tm_ok = augment.tm_score(np.zeros(50), 50) == 1.0 and abs(augment.tm_score(np.full(50, d0), 50) - 0.5) <= 1e-15

    F = augment.FilterScores
    boundary = [
        (F(0.9 + 1e-9, 0.4, 0.40), True),
        (F(0.90, 0.4, 0.40), False),
        (F(0.95, 0.4 - 1e-12, 0.5), False),
        (F(0.95, 0.5, 0.40 - 1e-12), False),
    ]
    boundary_ok = all(augment.passes_thresholds(s) == want for s, want in boundary)
    prot = _toy_protein(rng)
    res = sorted(set(prot.annotations["residue_index"].tolist()))
    ligand = chemio.Structure(("C",), prot.coords[:5].mean(axis=0, keepdims=True))
    pocket = augment.pocket_residues(prot, ligand)
    same = augment.HomologCandidate(prot, prot, [(r, r) for r in res], pocket)
    acc, sc = augment.homoaug_filter(same)
    low = chemio.Structure(prot.elements, prot.coords, {**prot.annotations, "plddt": np.full(len(prot), 0.5)})
    rej, _ = augment.homoaug_filter(augment.HomologCandidate(low, prot, [(r, r) for r in res], pocket))
    filter_ok = acc and abs(sc.tm_score - 1.0) < 1e-12 and sc.alignment_rate == 1.0 and not rej

    lig = chemio.Structure(("C",), np.zeros((1, 3)))
    ring = chemio.Structure(("C", "C", "C"), np.array([[6.0, 0, 0], [0, 6.0 + 1e-9, 0], [0, 0, 5.999999]]))
    cut = chemio.extract_pocket(ring, lig, 6.0)
    pocket_ok = len(cut) == 2 and np.array_equal(cut.coords, ring.coords[[0, 2]])

    ok = kabsch_ok and tm_ok and boundary_ok and filter_ok and pocket_ok
    return ok, (
        f"kabsch worst {worst:.1e}; tm fixed points {'ok' if tm_ok else 'bad'}; "
        f"boundaries {'ok' if boundary_ok else 'bad'}; filter {'ok' if filter_ok else 'bad'}; "
        f"6 A cut {'ok' if pocket_ok else 'bad'}"
    )


# 10 -------------------------------------------------
def _expect(buf: bytes, loader, exc_type) -> bool:
    try:
        loader(buf)
    except exc_type:
        return True
    except FormatError:
        return False
    return False


def round_trips(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    with tempfile.TemporaryDirectory() as tmp:
        ipath, cpath = Path(tmp) / "a.dcix", Path(tmp) / "m.dcmp"
        retrieval.build_index(rng.standard_normal((257, 24)), [f"id{i}" for i in range(257)], "cosine", ipath)
        ibuf = ipath.read_bytes()
        index_ok = retrieval.index_bytes(retrieval.load_index(ipath)) == ibuf
        model = encoder.DualEncoder.initialize(encoder.EncoderConfig(n_layers=2, d_model=32, n_heads=4, d_out=16), seed)
        encoder.save_checkpoint(model, cpath)
        cbuf = cpath.read_bytes()
        ckpt_ok = encoder.checkpoint_bytes(encoder.load_checkpoint(cpath)) == cbuf

    def patched(buf, offset, value):
        b = bytearray(buf)
        b[offset : offset + len(value)] = value
        return bytes(b)

    cases = []
    for buf, load in ((ibuf, retrieval.index_from_bytes), (cbuf, encoder.checkpoint_from_bytes)):
        cases += [
            _expect(patched(buf, 0, b"XXXX"), load, BadMagicError),
            _expect(patched(buf, 4, (2).to_bytes(4, "little")), load, VersionMismatchError),
            _expect(buf[: len(buf) - 3], load, TruncatedFileError),
        ]
    cases.append(_expect(patched(ibuf, 8, b"\x07"), retrieval.index_from_bytes, CorruptHeaderError))
    cases.append(_expect(patched(ibuf, 30, b"\x01"), retrieval.index_from_bytes, CorruptHeaderError))
    classes = {BadMagicError, VersionMismatchError, TruncatedFileError, CorruptHeaderError}
    distinct = len(classes) == 4 and not any(issubclass(a, b) for a, b in itertools.permutations(classes, 2))
    ok = index_ok and ckpt_ok and all(cases) and distinct
    return ok, f"index bitwise {index_ok}, checkpoint bitwise {ckpt_ok}, {sum(cases)}/{len(cases)} corruptions rejected distinctly"


CHECKS: dict[int, tuple[str, Callable[[], tuple[bool, str]]]] = {
    1: ("gradient correctness", gradients),
    2: ("SE(3) and permutation invariance", invariance),
    3: ("single-tower vs dual-tower translation", two_tower_contrast),
    4: ("contrastive loss analytic values", contrastive_values),
    5: ("overfit retrieval", overfit),
    6: ("retrieval exactness", retrieval_exactness),
    7: ("throughput", throughput),
    8: ("metric oracles", metric_oracles),
    9: ("homology augmentation", homology),
    10: ("format round-trips", round_trips),
}
SLOW = frozenset({5, 7})


def run(numbers=None) -> list[CheckResult]:
    numbers = sorted(CHECKS) if numbers is None else numbers
    return [_run(n, CHECKS[n][0], CHECKS[n][1]) for n in numbers]
