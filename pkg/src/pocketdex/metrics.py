"""Virtual-screening metrics: AUROC, BEDROC, enrichment factor, ROC enrichment
and accuracy@k.

Rankings sort by descending score and break ties by ascending id, so every
metric is a deterministic function of its input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True, eq=False)
class LabeledScores:
    ids: tuple[str, ...]
    scores: np.ndarray
    labels: np.ndarray  # True for actives

    def __init__(self, ids: Sequence[str], scores, labels):
        ids = tuple(str(i) for i in ids)
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels).astype(bool)
        if not (len(ids) == scores.shape[0] == labels.shape[0]):
            raise ValueError("ids, scores and labels must have equal length")
        if len(set(ids)) != len(ids):
            raise ValueError("ids must be unique")
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_actives(self) -> int:
        return int(self.labels.sum())

    @property
    def n_decoys(self) -> int:
        return len(self) - self.n_actives

    def order(self) -> np.ndarray:
        """Positions sorted by descending score, ties by ascending id."""
        id_rank = np.empty(len(self.ids), dtype=np.int64)
        id_rank[sorted(range(len(self.ids)), key=self.ids.__getitem__)] = np.arange(len(self.ids))
        return np.lexsort((id_rank, -self.scores))

    def ranked_labels(self) -> np.ndarray:
        return self.labels[self.order()]


@dataclass(frozen=True)
class MetricParams:
    alpha: float = 85.0
    ef_fractions: tuple[float, ...] = (0.005, 0.01, 0.05)
    re_fprs: tuple[float, ...] = (0.005, 0.01, 0.02, 0.05)
    ks: tuple[int, ...] = (1, 2, 3, 4, 5)

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if any(not 0 < f <= 1 for f in self.ef_fractions):
            raise ValueError("EF fractions must lie in (0, 1]")
        if any(not 0 < f < 1 for f in self.re_fprs):
            raise ValueError("RE false-positive rates must lie in (0, 1)")
        if any(k < 1 for k in self.ks):
            raise ValueError("k must be positive")


def _require_both(d: LabeledScores) -> None:
    if d.n_actives == 0:
        raise ValueError("no actives")
    if d.n_decoys == 0:
        raise ValueError("no decoys")


def _ceil_count(fraction: float, n: int) -> int:
    # Rounding to 9 places first keeps 0.07 * 100 = 7.000000000000001 at 7.
    return math.ceil(round(fraction * n, 9))


def auroc(d: LabeledScores) -> float:
    """Mann-Whitney AUROC with midranks for tied scores."""
    _require_both(d)
    ranks = rankdata(d.scores, method="average")
    p, n = d.n_actives, d.n_decoys
    u = ranks[d.labels].sum() - p * (p + 1) / 2.0
    return float(u / (p * n))


def bedroc(d: LabeledScores, alpha: float = 85.0) -> float:
    """BEDROC with R_alpha taken as the active ratio n/N."""
    _require_both(d)
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    labels = d.ranked_labels()
    N = len(labels)
    n = int(labels.sum())
    ranks = np.flatnonzero(labels) + 1.0
    ra = n / N
    # sum_i e^{-alpha r_i / N} normalized by its random-ranking expectation
    rie_num = np.exp(-alpha * ranks / N).sum()
    rie_den = ra * (-math.expm1(-alpha)) / math.expm1(alpha / N)
    rie = rie_num / rie_den
    scale = ra * math.sinh(alpha / 2.0) / (math.cosh(alpha / 2.0) - math.cosh(alpha / 2.0 - alpha * ra))
    offset = 1.0 / (-math.expm1(alpha * (1.0 - ra)))
    value = rie * scale + offset
    if -1e-9 < value < 0.0:
        value = 0.0
    elif 1.0 < value < 1.0 + 1e-9:
        value = 1.0
    return float(value)


def enrichment_factor(d: LabeledScores, fraction: float) -> float:
    """NTB_top / (NTB_total * fraction), top = the first ceil(fraction * N) ranks."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    _require_both(d)
    labels = d.ranked_labels()
    cut = _ceil_count(fraction, len(labels))
    return float(labels[:cut].sum() / (d.n_actives * fraction))


def roc_enrichment(d: LabeledScores, fpr: float) -> float:
    """TP * n / (P * FP) at the first rank where ceil(fpr * decoys) decoys have been seen."""
    if not 0 < fpr < 1:
        raise ValueError("fpr must lie in (0, 1)")
    _require_both(d)
    fp_target = _ceil_count(fpr, d.n_decoys)
    if fp_target == 0:
        raise ValueError(f"fpr {fpr} selects zero of {d.n_decoys} decoys")
    labels = d.ranked_labels()
    fp_cum = np.cumsum(~labels)
    stop = int(np.searchsorted(fp_cum, fp_target))  # first index where fp_cum == fp_target
    tp = int(labels[: stop + 1].sum())
    return float(tp * len(labels) / (d.n_actives * fp_target))


def accuracy_at_k(rank_of_truth: Sequence[int], k: int) -> float:
    ranks = np.asarray(list(rank_of_truth), dtype=np.int64)
    if ranks.size == 0:
        raise ValueError("empty rank list")
    if np.any(ranks < 1):
        raise ValueError("ranks are 1-based")
    if k < 1:
        raise ValueError("k must be positive")
    return float(np.mean(ranks <= k))


def evaluate(d: LabeledScores, params: MetricParams = MetricParams()) -> dict[str, float]:
    out = {"auroc": auroc(d), f"bedroc_{params.alpha:g}": bedroc(d, params.alpha)}
    for f in params.ef_fractions:
        out[f"ef_{f * 100:g}%"] = enrichment_factor(d, f)
    for f in params.re_fprs:
        out[f"re_{f * 100:g}%"] = roc_enrichment(d, f)
    return out


def read_scores_labels(scores_text: str, labels_text: str) -> LabeledScores:
    """Join ``id,score`` and ``id,label`` CSV text on id."""
    import csv
    import io

    def rows(text, header):
        body = "\n".join(line for line in text.splitlines() if not line.lstrip().startswith("#"))
        reader = csv.reader(io.StringIO(body))
        got = [h.strip().lower() for h in next(reader, [])]
        # screening output (rank,id,score) is accepted as a score file
        skip = 1 if got == ["rank", *header] else 0
        if got[skip:] != list(header):
            raise ValueError(f"expected header {','.join(header)}, got {','.join(got)}")
        return [(r[skip].strip(), r[skip + 1].strip()) for r in reader if r and r[0].strip()]

    scores = {i: float(s) for i, s in rows(scores_text, ("id", "score"))}
    labels = {}
    for i, lab in rows(labels_text, ("id", "label")):
        if lab not in ("0", "1"):
            raise ValueError(f"label for {i!r} must be 0 or 1, got {lab!r}")
        labels[i] = lab == "1"
    missing = sorted(set(scores) ^ set(labels))
    if missing:
        raise ValueError(f"ids present in only one file: {', '.join(missing[:5])}")
    ids = sorted(scores)
    return LabeledScores(ids, [scores[i] for i in ids], [labels[i] for i in ids])
