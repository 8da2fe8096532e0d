"""Joint optimization of the pocket and molecule towers.

The batch loss is the two-sided contrastive loss plus optional weighted
auxiliaries: the top-k/top-k atom-interaction term (subtracted, positive
pairs only), masked-type cross-entropy and pair-distance denoising. All
randomness is drawn from generators seeded by ``(seed, step)`` so runs
reproduce exactly.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .chemio import DEFAULT_VOCAB, TokenizedEntity, pad_batch
from .encoder import (
    DualEncoder,
    EncoderConfig,
    ModelParams,
    distance_head,
    encode_batch,
    forward_entities,
    type_head,
)
from .errors import TrainingDivergedError
from .objective import (
    ContrastiveConfig,
    CorruptionConfig,
    SimilarityMetric,
    corrupt_coords,
    drugclip_loss,
    mask_types,
    similarity_matrix,
    topk_topk_loss,
)

log = logging.getLogger(__name__)

COMPONENTS = ("contrastive", "topk", "masked", "denoise")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 200
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    temperature: float = 0.07
    metric: str = "cosine"
    topk_weight: float = 0.0
    topk_k: int = 4
    topk_layer: str = "second_last"
    masked_weight: float = 0.0
    denoise_weight: float = 0.0
    corrupt_fraction: float = 0.15
    noise_range: float = 1.0
    mask_fraction: float = 0.15
    conformer_noise: bool = False
    jitter_sigma: float = 0.2
    bedroc_alpha: float = 85.0
    grad_clip: float = 0.0  # global-norm clip; 0 disables

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 for contrastive training")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        for name in ("masked_weight", "denoise_weight", "jitter_sigma", "grad_clip"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        self.contrastive  # validates temperature, metric, top-k settings
        self.corruption

    @property
    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(self.temperature, SimilarityMetric.parse(self.metric), self.topk_weight, self.topk_k, self.topk_layer)

    @property
    def corruption(self) -> CorruptionConfig:
        return CorruptionConfig(self.corrupt_fraction, self.noise_range, self.mask_fraction)

    def weight(self, component: str) -> float:
        return {"contrastive": 1.0, "topk": self.topk_weight, "masked": self.masked_weight, "denoise": self.denoise_weight}[component]


def _coerce(value: str, typ):
    if typ in (bool, "bool"):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    return value.strip()


def parse_train_config(text: str, **overrides) -> TrainConfig:
    """Read ``key = value`` lines (``#`` starts a comment) into a TrainConfig."""
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value")
        if key not in fields:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(value, fields[key])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def format_train_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in dataclasses.fields(cfg))


@dataclass(frozen=True)
class PairRecord:
    pocket: TokenizedEntity
    molecule: TokenizedEntity
    pair_id: str


class PairDataset(Sequence[PairRecord]):
    def __init__(self, records: Sequence[PairRecord]):
        self.records = list(records)
        seen = set()
        for r in self.records:
            if r.pair_id in seen:
                raise ValueError(f"duplicate pair_id {r.pair_id!r}")
            seen.add(r.pair_id)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return PairDataset(self.records[i])
        return self.records[i]

    def subset(self, indices) -> "PairDataset":
        return PairDataset([self.records[i] for i in indices])

    @property
    def ids(self) -> list[str]:
        return [r.pair_id for r in self.records]


# -- loss -------------------------------------------------
@dataclass
class LossBreakdown:
    total: float
    contrastive: float
    topk: float = 0.0
    masked: float = 0.0
    denoise: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)


def _step_rng(seed: int, step: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, step, stream])


def _maybe_jitter(mols: list[TokenizedEntity], cfg: TrainConfig, seed: int, step: int) -> list[TokenizedEntity]:
    if not cfg.conformer_noise:
        return mols
    from .augment import jitter_entity

    ss = _step_rng(seed, step, 0).spawn(len(mols))
    return [jitter_entity(m, cfg.jitter_sigma, s) for m, s in zip(mols, ss)]


def _masked_type_term(p: Mapping[str, Tensor], config: EncoderConfig, entities, cfg: TrainConfig, seqs) -> Tensor:
    masked, positions, truths = [], [], []
    for e, s in zip(entities, seqs):
        m, pos, truth = mask_types(e, cfg.corruption, s)
        masked.append(m)
        positions.append(pos)
        truths.append(truth)
    out = forward_entities(p, config, masked)
    logits = type_head(out.final, p)
    rows = np.concatenate([np.full(len(pos), i) for i, pos in enumerate(positions)])
    cols = np.concatenate(positions)
    target = np.concatenate(truths)
    logp = ag.log_softmax(logits[rows, cols], axis=-1)
    onehot = np.zeros(logp.shape)
    onehot[np.arange(len(target)), target] = 1.0
    return -(logp * onehot).sum() * (1.0 / len(target))


def _denoise_term(p: Mapping[str, Tensor], config: EncoderConfig, entities, cfg: TrainConfig, seqs) -> Tensor:
    corrupted, truths = [], []
    for e, s in zip(entities, seqs):
        c, _, truth = corrupt_coords(e, cfg.corruption, s)
        corrupted.append(c)
        truths.append(truth)
    out = forward_entities(p, config, corrupted)
    pred = distance_head(out.pair, p)  # [B, L, L]
    b, l = pred.shape[:2]
    target = np.zeros((b, l, l))
    weight = np.zeros((b, l, l))
    for i, (e, truth) in enumerate(zip(entities, truths)):
        n = len(e)
        target[i, :n, :n] = truth
        real = e.mask.copy()
        real[e.cls_index] = False
        weight[i, :n, :n] = np.outer(real, real)
    err = pred - target
    return (err * err * weight).sum() * (1.0 / weight.sum())


def _topk_term(out_p, out_m, pockets, mols, cfg: TrainConfig) -> Tensor:
    layer = -2 if cfg.topk_layer == "second_last" and len(out_p.atoms) > 1 else -1
    hp, hm = out_p.atoms[layer], out_m.atoms[layer]
    terms = []
    for i, (pe, me) in enumerate(zip(pockets, mols)):
        p_idx = np.flatnonzero(pe.mask)[1:]
        m_idx = np.flatnonzero(me.mask)[1:]
        terms.append(topk_topk_loss(hm[i][m_idx], hp[i][p_idx], cfg.topk_k))
    return ag.stack(terms).sum() * (1.0 / len(terms))


def batch_losses(
    tp: Mapping[str, Tensor],
    tm: Mapping[str, Tensor],
    config: EncoderConfig,
    batch: Sequence[PairRecord],
    cfg: TrainConfig,
    step: int = 0,
    components: Sequence[str] | None = None,
) -> dict[str, Tensor]:
    """Loss terms for one batch. ``components`` defaults to the terms with non-zero weight."""
    if components is None:
        components = [c for c in COMPONENTS if cfg.weight(c) > 0]
    pockets = [r.pocket for r in batch]
    mols = _maybe_jitter([r.molecule for r in batch], cfg, cfg.seed, step)
    terms: dict[str, Tensor] = {}
    if "contrastive" in components or "topk" in components:
        out_p = forward_entities(tp, config, pockets)
        out_m = forward_entities(tm, config, mols)
        if "contrastive" in components:
            S = similarity_matrix(out_p.embedding, out_m.embedding, cfg.contrastive.metric)
            terms["contrastive"] = drugclip_loss(S, cfg.temperature)
        if "topk" in components:
            terms["topk"] = _topk_term(out_p, out_m, pockets, mols, cfg)
    if "masked" in components:
        sp, sm = _step_rng(cfg.seed, step, 1).spawn(2)
        terms["masked"] = (
            _masked_type_term(tp, config, pockets, cfg, sp.spawn(len(pockets)))
            + _masked_type_term(tm, config, mols, cfg, sm.spawn(len(mols)))
        ) * 0.5
    if "denoise" in components:
        sp, sm = _step_rng(cfg.seed, step, 2).spawn(2)
        terms["denoise"] = (
            _denoise_term(tp, config, pockets, cfg, sp.spawn(len(pockets)))
            + _denoise_term(tm, config, mols, cfg, sm.spawn(len(mols)))
        ) * 0.5
    return terms


def combine(terms: Mapping[str, Tensor], cfg: TrainConfig) -> Tensor:
    total = ag.as_tensor(0.0)
    for name in COMPONENTS:
        if name not in terms:
            continue
        w = cfg.weight(name)
        total = total - terms[name] * w if name == "topk" else total + terms[name] * w
    return total


# -- optimizers -------------------------------------------------
@dataclass
class OptState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _named(model: DualEncoder):
    for tower in ("pocket", "molecule"):
        params = model.tower(tower)
        for name in params.trainable():
            yield f"{tower}.{name}", tower, name


def apply_update(model: DualEncoder, grads: Mapping[str, np.ndarray], cfg: TrainConfig, state: OptState) -> tuple[DualEncoder, OptState]:
    new = model.copy()
    t = state.step + 1
    new_state = OptState(t, dict(state.m), dict(state.v))
    lr = cfg.lr
    for key, tower, name in _named(model):
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(model.tower(tower)[name])
        p = new.tower(tower).tensors
        if cfg.optimizer == "sgd":
            p[name] = p[name] - lr * g
            continue
        m = new_state.m.get(key, np.zeros_like(g))
        v = new_state.v.get(key, np.zeros_like(g))
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        new_state.m[key], new_state.v[key] = m, v
        mhat = m / (1.0 - cfg.beta1**t)
        vhat = v / (1.0 - cfg.beta2**t)
        p[name] = p[name] - lr * (mhat / (np.sqrt(vhat) + cfg.adam_eps))
    return new, new_state


def loss_and_grads(model: DualEncoder, batch, cfg: TrainConfig, step: int = 0, components=None):
    tp = model.pocket.as_tensors(requires_grad=True)
    tm = model.molecule.as_tensors(requires_grad=True)
    terms = batch_losses(tp, tm, model.config, batch, cfg, step, components)
    for name, value in terms.items():
        if not np.isfinite(value.data).all():
            raise TrainingDivergedError(f"loss term {name!r} is not finite ({value.data})", name)
    total = combine(terms, cfg)
    if not np.isfinite(total.data):
        raise TrainingDivergedError(f"total loss is not finite ({total.data})", "total")
    grads: dict[str, np.ndarray] = {}
    if total.requires_grad:
        total.backward()
    for tower, tensors in (("pocket", tp), ("molecule", tm)):
        for name, t in tensors.items():
            if t.grad is not None:
                grads[f"{tower}.{name}"] = t.grad
    breakdown = LossBreakdown(total=float(total.data), **{k: float(v.data) for k, v in terms.items()})
    return breakdown, grads


def train_step(batch, model: DualEncoder, cfg: TrainConfig, opt_state: OptState | None = None):
    """One optimizer step on both towers. Returns ``(model', opt_state', LossBreakdown)``."""
    if len(batch) < 2:
        raise ValueError("contrastive training needs a batch of at least 2 pairs")
    opt_state = opt_state or OptState()
    breakdown, grads = loss_and_grads(model, batch, cfg, opt_state.step)
    for key, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingDivergedError(f"gradient of {key} is not finite", key)
    if cfg.grad_clip > 0:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > cfg.grad_clip:
            grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
    new_model, new_state = apply_update(model, grads, cfg, opt_state)
    return new_model, new_state, breakdown


def evaluate_loss(model: DualEncoder, batch, cfg: TrainConfig, step: int = 0) -> LossBreakdown:
    tp, tm = model.pocket.as_tensors(), model.molecule.as_tensors()
    terms = batch_losses(tp, tm, model.config, batch, cfg, step)
    return LossBreakdown(total=float(combine(terms, cfg).data), **{k: float(v.data) for k, v in terms.items()})


# -- gradient verification -------------------------------------------------
def finite_difference_check(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    arrays: Mapping[str, np.ndarray],
    eps: float = 1e-4,
    sample: int = 64,
    seed: int = 0,
    candidates: Sequence[str] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences over
    ``sample`` random scalar entries of ``candidates`` (default: all arrays)."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    if sample < 1:
        raise ValueError("sample must be positive")
    arrays = {k: np.array(v, dtype=np.float64, copy=True) for k, v in arrays.items()}
    names = list(candidates) if candidates is not None else list(arrays)
    tensors = {k: Tensor(v, requires_grad=k in names) for k, v in arrays.items()}
    out = loss_fn(tensors)
    out.backward()
    analytic = {k: (tensors[k].grad if tensors[k].grad is not None else np.zeros_like(arrays[k])) for k in names}

    sizes = np.array([arrays[k].size for k in names], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    flat = rng.choice(offsets[-1], size=min(sample, int(offsets[-1])), replace=False)

    def value(arrs) -> float:
        return float(loss_fn({k: Tensor(v) for k, v in arrs.items()}).data)

    worst = 0.0
    for f in flat:
        which = int(np.searchsorted(offsets, f, side="right") - 1)
        name = names[which]
        idx = np.unravel_index(int(f - offsets[which]), arrays[name].shape)
        orig = arrays[name][idx]
        arrays[name][idx] = orig + eps
        up = value(arrays)
        arrays[name][idx] = orig - eps
        down = value(arrays)
        arrays[name][idx] = orig
        fd = (up - down) / (2.0 * eps)
        ga = float(analytic[name][idx])
        err = abs(ga - fd) / max(abs(ga), abs(fd), 1e-8)
        worst = max(worst, err)
    return worst


def _flatten(model: DualEncoder) -> dict[str, np.ndarray]:
    return {f"{tower}.{k}": v for tower in ("pocket", "molecule") for k, v in model.tower(tower).tensors.items()}


def _component_loss(model: DualEncoder, batch, cfg: TrainConfig, component: str, step: int = 0):
    config = model.config

    def fn(tensors: Mapping[str, Tensor]) -> Tensor:
        tp = {k[len("pocket.") :]: v for k, v in tensors.items() if k.startswith("pocket.")}
        tm = {k[len("molecule.") :]: v for k, v in tensors.items() if k.startswith("molecule.")}
        terms = batch_losses(tp, tm, config, batch, cfg, step, COMPONENTS if component == "total" else [component])
        return combine(terms, cfg) if component == "total" else terms[component]

    return fn


def participating(model: DualEncoder, batch, cfg: TrainConfig, component: str) -> list[str]:
    """Trainable tensors that receive a non-zero gradient from ``component``."""
    arrays = _flatten(model)
    trainable = [f"{t}.{n}" for _, t, n in _named(model)]
    tensors = {k: Tensor(v, requires_grad=k in trainable) for k, v in arrays.items()}
    _component_loss(model, batch, cfg, component)(tensors).backward()
    return [k for k in trainable if tensors[k].grad is not None and np.any(tensors[k].grad != 0.0)]


def gradient_check(
    model: DualEncoder,
    batch,
    cfg: TrainConfig,
    eps: float = 1e-4,
    sample: int = 64,
    component: str = "contrastive",
    seed: int = 0,
) -> float:
    """Finite-difference check of one loss component (or ``"total"``) over
    scalars drawn from the tensors that component actually touches."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    if component not in COMPONENTS + ("total",):
        raise ValueError(f"unknown component {component!r}")
    names = participating(model, batch, cfg, component)
    return finite_difference_check(_component_loss(model, batch, cfg, component), _flatten(model), eps, sample, seed, names)


# -- fit -------------------------------------------------
@dataclass
class FitResult:
    model: DualEncoder
    history: list[dict[str, float]]
    best_epoch: int | None = None
    opt_state: OptState | None = None


def make_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def similarity_on(model: DualEncoder, dataset: PairDataset, metric) -> np.ndarray:
    P = encode_batch([r.pocket for r in dataset], model.pocket)
    M = encode_batch([r.molecule for r in dataset], model.molecule)
    return similarity_matrix(P, M, metric)


def retrieval_top1(model: DualEncoder, dataset: PairDataset, metric="cosine") -> float:
    """Fraction of pockets whose own molecule strictly outscores every other one."""
    S = similarity_on(model, dataset, metric)
    off = S.copy()
    np.fill_diagonal(off, -np.inf)
    return float(np.mean(np.diag(S) > off.max(axis=1)))


def validation_bedroc(model: DualEncoder, dataset: PairDataset, cfg: TrainConfig) -> float:
    """Mean BEDROC over pockets, each screening all validation molecules with
    its own partner as the single active."""
    from .metrics import LabeledScores, bedroc

    S = similarity_on(model, dataset, cfg.metric)
    ids = dataset.ids
    values = []
    for i in range(len(ids)):
        labels = np.zeros(len(ids), dtype=bool)
        labels[i] = True
        values.append(bedroc(LabeledScores(ids, S[i], labels), cfg.bedroc_alpha))
    return float(np.mean(values))


def fit(
    dataset: PairDataset,
    cfg: TrainConfig,
    validation: PairDataset | None = None,
    init: DualEncoder | None = None,
    config: EncoderConfig | None = None,
    on_epoch: Callable[[dict], None] | None = None,
    stop_when: Callable[[dict, DualEncoder], bool] | None = None,
) -> FitResult:
    """Train for up to ``cfg.epochs`` epochs. ``stop_when(row, model)`` returning
    True ends training after that epoch."""
    if len(dataset) < cfg.batch_size:
        raise ValueError(f"dataset has {len(dataset)} pairs, fewer than batch_size {cfg.batch_size}")
    model = init if init is not None else DualEncoder.initialize(config or EncoderConfig(), cfg.seed)
    if cfg.epochs == 0:
        return FitResult(model, [], None, OptState())
    rng = np.random.default_rng(cfg.seed)
    state = OptState()
    history: list[dict[str, float]] = []
    best_model, best_score, best_epoch = model, -math.inf, None
    for epoch in range(1, cfg.epochs + 1):
        sums: dict[str, float] = {}
        batches = make_batches(len(dataset), cfg.batch_size, rng)
        for idx in batches:
            batch = [dataset[int(i)] for i in idx]
            try:
                model, state, br = train_step(batch, model, cfg, state)
            except TrainingDivergedError as exc:
                exc.last_good = FitResult(best_model if best_epoch is not None else model, history, best_epoch, state)
                raise
            for k, v in br.as_dict().items():
                sums[k] = sums.get(k, 0.0) + v
        row = {"epoch": epoch, **{k: v / len(batches) for k, v in sums.items()}}
        if validation is not None:
            score = validation_bedroc(model, validation, cfg)
            row["val_bedroc"] = score
            if score > best_score:
                best_model, best_score, best_epoch = model, score, epoch
        history.append(row)
        log.info("epoch %d loss %.6f", epoch, row["total"])
        if on_epoch is not None:
            on_epoch(row)
        if stop_when is not None and stop_when(row, model):
            break
    if validation is None:
        best_model, best_epoch = model, len(history)
    return FitResult(best_model, history, best_epoch, state)


HISTORY_COLUMNS = ("epoch", "total", "contrastive", "topk", "masked", "denoise", "val_bedroc")


def history_csv(history: Sequence[Mapping[str, float]], header: str | None = None) -> str:
    out = io.StringIO()
    if header:
        out.write(f"# {header}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for row in history:
        w.writerow([row.get("epoch")] + [f"{row[c]:.8g}" if c in row else "" for c in HISTORY_COLUMNS[1:]])
    return out.getvalue()


def read_pair_manifest(path) -> PairDataset:
    """CSV ``id,pocket,molecule`` with structure paths relative to the manifest."""
    from .chemio import read_structure, tokenize

    path = Path(path)
    body = [ln for ln in path.read_text().splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    reader = csv.reader(body)
    header = [h.strip().lower() for h in next(reader, [])]
    if header != ["id", "pocket", "molecule"]:
        raise ValueError(f"{path}: expected header id,pocket,molecule")
    records = []
    for row in reader:
        pid, pocket, mol = (c.strip() for c in row)
        records.append(
            PairRecord(
                tokenize(read_structure(path.parent / pocket)),
                tokenize(read_structure(path.parent / mol)),
                pid,
            )
        )
    return PairDataset(records)
