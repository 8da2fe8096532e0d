"""SE(3)-invariant pair-bias transformer tower.

Atoms enter as type embeddings; geometry enters only through pairwise
distances, expanded in a Gaussian radial basis and mapped to one additive
attention bias per head. Every layer adds its pre-softmax logits to the pair
channel, so the bias seen by layer ``l + 1`` is ``q_l + Q K^T / sqrt(d_head)``.
The [CLS] row of the last layer, projected to ``d_out``, is the embedding.

Parameters live in a :class:`ModelParams` (name -> float64 array, insertion
order is the serialization order). The forward pass runs on
:mod:`pocketdex.autograd` tensors so the trainer can differentiate it.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .chemio import DEFAULT_VOCAB, TokenizedEntity, Vocab, pad_batch, pairwise_distances
from .errors import (
    BadMagicError,
    CorruptHeaderError,
    EntityTooLongError,
    TruncatedFileError,
    VersionMismatchError,
)

MASK_BIAS = -1e9
# Gaussian basis parameters are fixed; everything else trains.
FROZEN = frozenset({"pair.centers", "pair.widths"})


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_pair_basis: int = 16
    d_out: int = 32
    max_len: int = 128
    vocab_size: int = len(DEFAULT_VOCAB)
    basis_max: float = 15.0
    ffn_mult: int = 4

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_pair_basis", "d_out", "max_len", "vocab_size", "ffn_mult"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must equal n_heads * d_head")
        if self.n_layers < 1:
            raise ValueError("need at least one layer")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EncoderConfig":
        return cls(**json.loads(text))


@dataclass
class ModelParams:
    config: EncoderConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def trainable(self) -> list[str]:
        return [k for k in self.tensors if k not in FROZEN]

    def n_parameters(self, trainable_only: bool = True) -> int:
        names = self.trainable() if trainable_only else list(self.tensors)
        return int(sum(self.tensors[k].size for k in names))

    def as_tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {
            k: Tensor(v, requires_grad=requires_grad and k not in FROZEN, name=k)
            for k, v in self.tensors.items()
        }


def init_params(config: EncoderConfig, seed: int = 0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit LN scales."""
    rng = np.random.default_rng(seed)
    D, H, K, V, F = config.d_model, config.n_heads, config.d_pair_basis, config.vocab_size, config.ffn_mult * config.d_model
    t: dict[str, np.ndarray] = {}

    def lin(name, fan_in, fan_out, bias=True):
        bound = 1.0 / math.sqrt(fan_in)
        t[f"{name}.weight"] = rng.uniform(-bound, bound, (fan_in, fan_out))
        if bias:
            t[f"{name}.bias"] = np.zeros(fan_out)

    def ln(name):
        t[f"{name}.scale"] = np.ones(D)
        t[f"{name}.offset"] = np.zeros(D)

    t["type_embedding"] = rng.uniform(-1.0, 1.0, (V, D))
    centers = np.linspace(0.0, config.basis_max, K)
    spacing = centers[1] - centers[0] if K > 1 else 1.0
    t["pair.centers"] = centers
    t["pair.widths"] = np.full(K, spacing)
    lin("pair", K, H)
    for layer in range(config.n_layers):
        p = f"layer{layer}"
        ln(f"{p}.ln1")
        for proj in ("q", "k", "v", "o"):
            lin(f"{p}.{proj}", D, D)
        ln(f"{p}.ln2")
        lin(f"{p}.ffn1", D, F)
        lin(f"{p}.ffn2", F, D)
    ln("final_ln")
    lin("out_proj", D, config.d_out)
    lin("masked_type_head", D, V)
    lin("pair_dist_head1", H, H)
    lin("pair_dist_head2", H, 1)
    return ModelParams(config, t)


# -- forward -------------------------------------------------
@dataclass
class EncoderOutput:
    embedding: Tensor  # [B, d_out]
    atoms: list[Tensor]  # residual stream after each layer, [B, L, D]
    final: Tensor  # final-LN token representations, [B, L, D]
    pair: Tensor  # pair channels after the last layer, [B, H, L, L]
    mask: np.ndarray  # [B, L]


def gaussian_basis(dist: np.ndarray, centers: Tensor, widths: Tensor) -> Tensor:
    """exp(-(d - mu_k)^2 / (2 sigma_k^2)) over a trailing basis axis."""
    d = ag.as_tensor(dist[..., None])
    z = (d - centers) / widths
    return (z * z * -0.5).exp()


def init_pair_bias(coords: np.ndarray, p: Mapping[str, Tensor]) -> Tensor:
    """Pair bias ``q0`` of shape [B, H, L, L] from a batch of coordinates [B, L, 3]."""
    diff = coords[:, :, None, :] - coords[:, None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    basis = gaussian_basis(dist, p["pair.centers"], p["pair.widths"])  # [B, L, L, K]
    q = basis @ p["pair.weight"] + p["pair.bias"]  # [B, L, L, H]
    return q.transpose(0, 3, 1, 2)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, l, d = x.shape
    return x.reshape(b, l, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def attention_layer(h: Tensor, q: Tensor, p: Mapping[str, Tensor], prefix: str, key_bias: np.ndarray, n_heads: int):
    """One pre-norm block. Returns ``(h', q', attn)``; ``attn`` is [B, H, L, L]."""
    b, l, d = h.shape
    dh = d // n_heads
    x = ag.layer_norm(h, p[f"{prefix}.ln1.scale"], p[f"{prefix}.ln1.offset"])
    Q = _split_heads(x @ p[f"{prefix}.q.weight"] + p[f"{prefix}.q.bias"], n_heads)
    K = _split_heads(x @ p[f"{prefix}.k.weight"] + p[f"{prefix}.k.bias"], n_heads)
    V = _split_heads(x @ p[f"{prefix}.v.weight"] + p[f"{prefix}.v.bias"], n_heads)
    logits = (Q @ K.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    attn = ag.softmax(logits + q + key_bias, axis=-1)
    ctx = (attn @ V).transpose(0, 2, 1, 3).reshape(b, l, d)
    h = h + ctx @ p[f"{prefix}.o.weight"] + p[f"{prefix}.o.bias"]
    y = ag.layer_norm(h, p[f"{prefix}.ln2.scale"], p[f"{prefix}.ln2.offset"])
    y = ag.gelu(y @ p[f"{prefix}.ffn1.weight"] + p[f"{prefix}.ffn1.bias"])
    h = h + y @ p[f"{prefix}.ffn2.weight"] + p[f"{prefix}.ffn2.bias"]
    return h, q + logits, attn


def forward(p: Mapping[str, Tensor], config: EncoderConfig, type_ids: np.ndarray, coords: np.ndarray, mask: np.ndarray) -> EncoderOutput:
    """Batched forward pass over padded arrays ``[B, L]``, ``[B, L, 3]``, ``[B, L]``."""
    if type_ids.shape[1] > config.max_len:
        raise EntityTooLongError(f"entity length {type_ids.shape[1]} exceeds max_len {config.max_len}")
    key_bias = np.where(mask, 0.0, MASK_BIAS)[:, None, None, :]
    h = p["type_embedding"][type_ids]
    q = init_pair_bias(coords, p)
    atoms = []
    for layer in range(config.n_layers):
        h, q, _ = attention_layer(h, q, p, f"layer{layer}", key_bias, config.n_heads)
        atoms.append(h)
    final = ag.layer_norm(h, p["final_ln.scale"], p["final_ln.offset"])
    emb = final[:, 0, :] @ p["out_proj.weight"] + p["out_proj.bias"]
    return EncoderOutput(emb, atoms, final, q, mask)


def _check_lengths(entities, config: EncoderConfig) -> None:
    for e in entities:
        if len(e) > config.max_len:
            raise EntityTooLongError(f"entity length {len(e)} exceeds max_len {config.max_len}")


def forward_entities(p: Mapping[str, Tensor], config: EncoderConfig, entities, vocab: Vocab = DEFAULT_VOCAB) -> EncoderOutput:
    _check_lengths(entities, config)
    return forward(p, config, *pad_batch(entities, vocab=vocab))


def init_pair_repr(entity: TokenizedEntity, params: ModelParams) -> np.ndarray:
    """Layer-0 pair representation as an ``(L+1, L+1, H)`` array."""
    p = params.as_tensors()
    q = init_pair_bias(entity.coords[None], p)
    return q.data[0].transpose(1, 2, 0)


def encode(entity: TokenizedEntity, params: ModelParams) -> np.ndarray:
    return encode_batch([entity], params)[0]


def encode_batch(entities, params: ModelParams, batch_size: int = 64) -> np.ndarray:
    """Embeddings for many entities; each is encoded at its own length, so
    results do not depend on what else is in the batch."""
    config = params.config
    _check_lengths(entities, config)
    p = params.as_tensors()
    out = np.empty((len(entities), config.d_out))
    # Group equal lengths so padding never enters a batch.
    by_len: dict[int, list[int]] = {}
    for i, e in enumerate(entities):
        by_len.setdefault(len(e), []).append(i)
    for idx in by_len.values():
        for start in range(0, len(idx), batch_size):
            chunk = idx[start : start + batch_size]
            res = forward_entities(p, config, [entities[i] for i in chunk])
            out[chunk] = res.embedding.data
    return out


def masked_type_logits(entity: TokenizedEntity, mask_positions, params: ModelParams, vocab: Vocab = DEFAULT_VOCAB) -> np.ndarray:
    positions = np.asarray(list(mask_positions), dtype=np.int64)
    if positions.size == 0:
        raise ValueError("mask_positions must be non-empty")
    if np.any(positions == entity.cls_index):
        raise ValueError("the [CLS] position cannot be masked")
    if np.any(positions < 0) or np.any(positions >= len(entity)):
        raise ValueError("mask position out of range")
    ids = entity.type_ids.copy()
    ids[positions] = vocab.mask_id
    p = params.as_tensors()
    res = forward_entities(p, params.config, [entity.replace(type_ids=ids)])
    return type_head(res.final, p).data[0, positions]


def type_head(final: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    return final @ p["masked_type_head.weight"] + p["masked_type_head.bias"]


def distance_head(pair: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Symmetric, non-negative distance prediction [B, L, L] from pair channels."""
    x = pair.transpose(0, 2, 3, 1)  # [B, L, L, H]
    x = ag.gelu(x @ p["pair_dist_head1.weight"] + p["pair_dist_head1.bias"])
    x = ag.softplus(x @ p["pair_dist_head2.weight"] + p["pair_dist_head2.bias"])
    x = x.reshape(x.shape[:3])
    return (x + x.swapaxes(1, 2)) * 0.5


def pair_distance_pred(entity: TokenizedEntity, params: ModelParams) -> np.ndarray:
    p = params.as_tensors()
    res = forward_entities(p, params.config, [entity])
    return distance_head(res.pair, p).data[0]


def true_distances(entity: TokenizedEntity) -> np.ndarray:
    return pairwise_distances(entity.coords, entity.coords)


# -- checkpoint format -------------------------------------------------
CHECKPOINT_MAGIC = b"DCMP"
CHECKPOINT_VERSION = 1


@dataclass
class DualEncoder:
    """Pocket tower and molecule tower. Same architecture, separate weights."""

    pocket: ModelParams
    molecule: ModelParams

    @property
    def config(self) -> EncoderConfig:
        return self.pocket.config

    @classmethod
    def initialize(cls, config: EncoderConfig, seed: int = 0) -> "DualEncoder":
        return cls(init_params(config, seed), init_params(config, seed + 1))

    def tower(self, name: str) -> ModelParams:
        if name not in ("pocket", "molecule"):
            raise ValueError(f"unknown tower {name!r}")
        return getattr(self, name)

    def copy(self) -> "DualEncoder":
        return DualEncoder(self.pocket.copy(), self.molecule.copy())


def checkpoint_bytes(model: DualEncoder) -> bytes:
    """Serialize: magic, version u32, config JSON (u32 length), manifest, float32 LE data."""
    if model.pocket.config != model.molecule.config:
        raise ValueError("towers must share one configuration")
    entries = [(f"{tower}.{name}", arr) for tower in ("pocket", "molecule") for name, arr in model.tower(tower).tensors.items()]
    cfg = model.config.to_json().encode("utf-8")
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += struct.pack("<I", len(cfg)) + cfg
    out += struct.pack("<I", len(entries))
    for name, arr in entries:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
    for _, arr in entries:
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise TruncatedFileError(f"file truncated while reading {what}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def checkpoint_from_bytes(buf: bytes) -> DualEncoder:
    r = _Reader(buf)
    if len(buf) < 4 or r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    (cfg_len,) = r.unpack("<I", "config length")
    try:
        config = EncoderConfig.from_json(r.take(cfg_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, TypeError, ValueError) as exc:
        raise CorruptHeaderError(f"bad encoder config: {exc}") from None
    (count,) = r.unpack("<I", "tensor count")
    manifest = []
    total = 0
    for _ in range(count):
        (n,) = r.unpack("<H", "tensor name length")
        try:
            name = r.take(n, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptHeaderError("tensor name is not UTF-8") from None
        (ndim,) = r.unpack("<B", "tensor rank")
        shape = r.unpack(f"<{ndim}I", "tensor shape")
        manifest.append((name, shape))
        total += int(np.prod(shape, dtype=np.int64)) * 4
    if len(buf) - r.pos < total:
        raise TruncatedFileError(f"tensor data needs {total} bytes, {len(buf) - r.pos} present")
    if len(buf) - r.pos > total:
        raise CorruptHeaderError("trailing bytes after tensor data")
    towers: dict[str, dict[str, np.ndarray]] = {"pocket": {}, "molecule": {}}
    for name, shape in manifest:
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(size * 4, name), dtype="<f4").astype(np.float64).reshape(shape)
        tower, _, key = name.partition(".")
        if tower not in towers:
            raise CorruptHeaderError(f"tensor {name!r} belongs to no tower")
        towers[tower][key] = arr
    model = DualEncoder(ModelParams(config, towers["pocket"]), ModelParams(config, towers["molecule"]))
    expected = init_params(config, 0).tensors
    for tower in ("pocket", "molecule"):
        got = model.tower(tower).tensors
        if list(got) != list(expected) or any(got[k].shape != expected[k].shape for k in expected):
            raise CorruptHeaderError(f"{tower} tensors do not match the declared config")
    return model


def save_checkpoint(model: DualEncoder, path) -> None:
    from .io_utils import atomic_write_bytes

    atomic_write_bytes(path, checkpoint_bytes(model))


def load_checkpoint(path) -> DualEncoder:
    return checkpoint_from_bytes(Path(path).read_bytes())


def round_to_float32(model: DualEncoder) -> DualEncoder:
    """The model as it will look after a save/load cycle."""
    return DualEncoder(
        *(
            ModelParams(t.config, {k: v.astype(np.float32).astype(np.float64) for k, v in t.tensors.items()})
            for t in (model.pocket, model.molecule)
        )
    )
