"""Offline embedding index and exact online top-k search.

Index file layout (all integers little-endian)::

    magic "DCIX" | version u32 = 1 | metric u8 (0 dot, 1 cosine) | dim u32
    | count u64 | 15 zero bytes
    id table: count x (u16 byte length, UTF-8 bytes), in vector order
    payload:  count x dim float32, row-major

Search scores every stored vector in float64 and keeps the best ``k`` by
(descending score, ascending id). Work is split into fixed-size row chunks;
parallel scans hand whole chunks to workers, so each row is scored by the
same arithmetic whatever the thread count, and the merged result is
identical to the single-threaded one.
"""
from __future__ import annotations

import io
import os
import struct
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BadMagicError,
    CorruptHeaderError,
    DimensionMismatchError,
    DuplicateIdError,
    TruncatedFileError,
    VersionMismatchError,
)
from .objective import SimilarityMetric

INDEX_MAGIC = b"DCIX"
INDEX_VERSION = 1
HEADER = struct.Struct("<4sIBIQ15s")
CHUNK_ROWS = 32768
MAX_ID_BYTES = 0xFFFF


@dataclass(frozen=True, eq=False)
class EmbeddingIndex:
    dim: int
    metric: SimilarityMetric
    ids: tuple[str, ...]
    vectors: np.ndarray  # [count, dim] float32, read-only

    @property
    def count(self) -> int:
        return len(self.ids)

    @cached_property
    def id_rank(self) -> np.ndarray:
        """Position of each id in ascending code-point order."""
        order = np.argsort(np.array(self.ids, dtype=str), kind="stable")
        rank = np.empty(len(order), dtype=np.int64)
        rank[order] = np.arange(len(order))
        return rank

    def score_all(self, query, chunk_rows: int = CHUNK_ROWS) -> np.ndarray:
        """float64 scores of every stored vector against ``query``."""
        q = prepare_query(self, query)
        out = np.empty(self.count)
        for start in range(0, self.count, chunk_rows):
            out[start : start + chunk_rows] = _score_rows(self.vectors, start, min(start + chunk_rows, self.count), q)
        return out


@dataclass(frozen=True)
class RankedResult:
    entries: tuple[tuple[str, float], ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    @property
    def ids(self) -> list[str]:
        return [e[0] for e in self.entries]

    @property
    def scores(self) -> list[float]:
        return [e[1] for e in self.entries]

    def rank_of(self, item_id: str) -> int | None:
        for i, (e, _) in enumerate(self.entries, start=1):
            if e == item_id:
                return i
        return None

    def to_csv(self, header: str | None = None) -> str:
        lines = [f"# {header}"] if header else []
        lines.append("rank,id,score")
        lines += [f"{i},{e},{s:.6f}" for i, (e, s) in enumerate(self.entries, start=1)]
        return "\n".join(lines) + "\n"


# -- building -------------------------------------------------
def make_index(embeddings, ids: Sequence[str], metric=SimilarityMetric.DOT) -> EmbeddingIndex:
    metric = SimilarityMetric.parse(metric)
    ids = tuple(str(i) for i in ids)
    vecs = np.asarray(embeddings, dtype=np.float64)
    if vecs.ndim != 2:
        raise DimensionMismatchError("embeddings must be a 2-D array of uniform dimension")
    if vecs.shape[0] != len(ids):
        raise ValueError(f"{vecs.shape[0]} vectors but {len(ids)} ids")
    if vecs.shape[1] < 1:
        raise DimensionMismatchError("embedding dimension must be positive")
    _check_ids(ids)
    if not np.all(np.isfinite(vecs)):
        raise ValueError("embeddings must be finite")
    if metric is SimilarityMetric.COSINE:
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            bad = ids[int(np.flatnonzero(norms[:, 0] == 0.0)[0])]
            raise ValueError(f"zero vector {bad!r} cannot be stored under the cosine metric")
        vecs = vecs / norms
    stored = np.ascontiguousarray(vecs, dtype=np.float32)
    stored.setflags(write=False)
    return EmbeddingIndex(stored.shape[1], metric, ids, stored)


def _check_ids(ids: Sequence[str]) -> None:
    seen = set()
    for i in ids:
        if i in seen:
            raise DuplicateIdError(f"duplicate id {i!r}")
        seen.add(i)
        if len(i.encode("utf-8")) > MAX_ID_BYTES:
            raise ValueError(f"id longer than {MAX_ID_BYTES} bytes")


def _header_bytes(index: EmbeddingIndex) -> bytes:
    return HEADER.pack(INDEX_MAGIC, INDEX_VERSION, int(index.metric), index.dim, index.count, b"\0" * 15)


def _id_table(ids: Sequence[str]) -> bytes:
    out = bytearray()
    for i in ids:
        raw = i.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
    return bytes(out)


def index_bytes(index: EmbeddingIndex) -> bytes:
    return _header_bytes(index) + _id_table(index.ids) + index.vectors.astype("<f4", copy=False).tobytes()


def write_index(index: EmbeddingIndex, path) -> None:
    """Stream the index to a temp file beside ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_header_bytes(index))
            fh.write(_id_table(index.ids))
            for start in range(0, index.count, CHUNK_ROWS):
                fh.write(index.vectors[start : start + CHUNK_ROWS].astype("<f4", copy=False).tobytes())
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def build_index(embeddings, ids: Sequence[str], metric, path) -> EmbeddingIndex:
    index = make_index(embeddings, ids, metric)
    write_index(index, path)
    return index


# -- loading -------------------------------------------------
def index_from_bytes(buf) -> EmbeddingIndex:
    mv = memoryview(buf)
    size = len(mv)
    if size < 4 or bytes(mv[:4]) != INDEX_MAGIC:
        raise BadMagicError("not an index file (bad magic)")
    if size < HEADER.size:
        raise TruncatedFileError(f"header needs {HEADER.size} bytes, file has {size}")
    magic, version, metric_code, dim, count, reserved = HEADER.unpack_from(mv, 0)
    if version != INDEX_VERSION:
        raise VersionMismatchError(f"index format version {version}, expected {INDEX_VERSION}")
    if metric_code not in (0, 1):
        raise CorruptHeaderError(f"unknown metric code {metric_code}")
    if reserved != b"\0" * 15:
        raise CorruptHeaderError("reserved header bytes are not zero")
    if dim == 0:
        raise CorruptHeaderError("dimension is zero")
    # Bound the declared sizes by the file size before allocating anything.
    remaining = size - HEADER.size
    payload = count * dim * 4
    if count * 2 + payload > remaining:
        raise TruncatedFileError(f"header declares {count} x {dim} vectors but only {remaining} bytes follow")
    pos = HEADER.size
    ids = []
    for n in range(count):
        if pos + 2 > size:
            raise TruncatedFileError(f"id table truncated at entry {n}")
        (length,) = struct.unpack_from("<H", mv, pos)
        pos += 2
        if pos + length > size:
            raise TruncatedFileError(f"id table truncated at entry {n}")
        try:
            ids.append(bytes(mv[pos : pos + length]).decode("utf-8"))
        except UnicodeDecodeError:
            raise CorruptHeaderError(f"id {n} is not valid UTF-8") from None
        pos += length
    if size - pos < payload:
        raise TruncatedFileError(f"payload needs {payload} bytes, {size - pos} present")
    if size - pos > payload:
        raise CorruptHeaderError(f"{size - pos - payload} trailing bytes after payload")
    if len(set(ids)) != len(ids):
        seen = set()
        dup = next(i for i in ids if i in seen or seen.add(i))
        raise DuplicateIdError(f"duplicate id {dup!r} in index")
    vectors = np.frombuffer(mv, dtype="<f4", count=count * dim, offset=pos).reshape(count, dim)
    return EmbeddingIndex(int(dim), SimilarityMetric(metric_code), tuple(ids), vectors)


def load_index(path) -> EmbeddingIndex:
    return index_from_bytes(Path(path).read_bytes())


def read_index_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
    if len(head) < 4 or head[:4] != INDEX_MAGIC:
        raise BadMagicError("not an index file (bad magic)")
    if len(head) < HEADER.size:
        raise TruncatedFileError("header truncated")
    _, version, metric_code, dim, count, _ = HEADER.unpack(head)
    return {"version": version, "metric": metric_code, "dim": dim, "count": count}


# -- search -------------------------------------------------
def prepare_query(index: EmbeddingIndex, query) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dim:
        raise DimensionMismatchError(f"query dimension {q.shape[0]} does not match index dimension {index.dim}")
    if not np.all(np.isfinite(q)):
        raise ValueError("query must be finite")
    if index.metric is SimilarityMetric.COSINE:
        norm = np.linalg.norm(q)
        if norm == 0.0:
            raise ValueError("zero query vector under the cosine metric")
        q = q / norm
    return q


def _score_rows(vectors: np.ndarray, start: int, stop: int, q: np.ndarray) -> np.ndarray:
    return vectors[start:stop].astype(np.float64) @ q


def _order(scores: np.ndarray, ranks: np.ndarray) -> np.ndarray:
    return np.lexsort((ranks, -scores))


def _scan_chunks(index: EmbeddingIndex, q: np.ndarray, k: int, chunks: Sequence[int], chunk_rows: int):
    """Top-k candidates (global row indices, scores) over the given chunk numbers."""
    id_rank = index.id_rank
    cand_idx = np.empty(0, dtype=np.int64)
    cand_score = np.empty(0)
    for c in chunks:
        start = c * chunk_rows
        stop = min(start + chunk_rows, index.count)
        s = _score_rows(index.vectors, start, stop, q)
        if k < s.size:
            kth = np.partition(s, s.size - k)[s.size - k]
            local = np.flatnonzero(s >= kth)
        else:
            local = np.arange(s.size)
        cand_idx = np.concatenate([cand_idx, local + start])
        cand_score = np.concatenate([cand_score, s[local]])
        if cand_idx.size > 4 * k:
            keep = _order(cand_score, id_rank[cand_idx])[:k]
            cand_idx, cand_score = cand_idx[keep], cand_score[keep]
    return cand_idx, cand_score


def search(index: EmbeddingIndex, query, k: int, threads: int = 1, chunk_rows: int = CHUNK_ROWS) -> RankedResult:
    """Exact top-min(k, count) by the index metric; ties broken by ascending id.

    ``chunk_rows`` fixes the scoring grid; results for a given grid do not
    depend on ``threads``."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if threads < 1:
        raise ValueError("threads must be at least 1")
    if chunk_rows < 1:
        raise ValueError("chunk_rows must be at least 1")
    q = prepare_query(index, query)
    if index.count == 0:
        return RankedResult(())
    n_chunks = -(-index.count // chunk_rows)
    shards = [list(part) for part in np.array_split(np.arange(n_chunks), min(threads, n_chunks)) if len(part)]
    if len(shards) == 1:
        parts = [_scan_chunks(index, q, k, shards[0], chunk_rows)]
    else:
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            parts = list(pool.map(lambda sh: _scan_chunks(index, q, k, sh, chunk_rows), shards))
    idx = np.concatenate([p[0] for p in parts])
    sc = np.concatenate([p[1] for p in parts])
    keep = _order(sc, index.id_rank[idx])[:k]
    return RankedResult(tuple((index.ids[i], float(s)) for i, s in zip(idx[keep], sc[keep])))


def search_bruteforce(index: EmbeddingIndex, query, k: int, chunk_rows: int = CHUNK_ROWS) -> RankedResult:
    """Reference: score everything, then one full Python sort on (-score, id)."""
    scores = index.score_all(query, chunk_rows)
    order = sorted(range(index.count), key=lambda i: (-scores[i], index.ids[i]))
    return RankedResult(tuple((index.ids[i], float(scores[i])) for i in order[:k]))


# -- end-to-end pipelines -------------------------------------------------
def _query_pipeline(structure_file, checkpoint, index_path, k: int, tower: str, threads: int = 1) -> RankedResult:
    from .chemio import read_structure, tokenize
    from .encoder import encode, load_checkpoint

    model = checkpoint if not isinstance(checkpoint, (str, os.PathLike)) else load_checkpoint(checkpoint)
    index = index_path if isinstance(index_path, EmbeddingIndex) else load_index(index_path)
    if model.config.d_out != index.dim:
        raise DimensionMismatchError(
            f"checkpoint embedding dimension {model.config.d_out} does not match index dimension {index.dim}"
        )
    structure = read_structure(structure_file)
    query = encode(tokenize(structure), model.tower(tower))
    return search(index, query, k, threads)


def screen(pocket_file, model_checkpoint, index_path, k: int, threads: int = 1) -> RankedResult:
    """Encode a pocket with the pocket tower and rank the molecule index."""
    return _query_pipeline(pocket_file, model_checkpoint, index_path, k, "pocket", threads)


def fish(molecule_file, model_checkpoint, pocket_index_path, k: int, threads: int = 1) -> RankedResult:
    """Encode a molecule with the molecule tower and rank a pocket index."""
    return _query_pipeline(molecule_file, model_checkpoint, pocket_index_path, k, "molecule", threads)


# -- benchmarking -------------------------------------------------
@dataclass(frozen=True)
class BenchResult:
    threads: int
    n_queries: int
    seconds: float
    queries_per_sec: float
    dots_per_sec: float
    per_thread_queries_per_sec: float
    per_thread_dots_per_sec: float


def random_index(count: int, dim: int, metric=SimilarityMetric.DOT, seed: int = 0) -> EmbeddingIndex:
    rng = np.random.default_rng(seed)
    vectors = np.empty((count, dim), dtype=np.float32)
    for start in range(0, count, CHUNK_ROWS):
        stop = min(start + CHUNK_ROWS, count)
        vectors[start:stop] = rng.standard_normal((stop - start, dim), dtype=np.float32)
    metric = SimilarityMetric.parse(metric)
    if metric is SimilarityMetric.COSINE:
        for start in range(0, count, CHUNK_ROWS):
            block = vectors[start : start + CHUNK_ROWS].astype(np.float64)
            vectors[start : start + CHUNK_ROWS] = block / np.linalg.norm(block, axis=1, keepdims=True)
    vectors.setflags(write=False)
    width = len(str(max(count - 1, 0)))
    return EmbeddingIndex(dim, metric, tuple(f"v{i:0{width}d}" for i in range(count)), vectors)


def throughput_bench(index: EmbeddingIndex, n_queries: int, k: int, threads: int = 1, seed: int = 0) -> BenchResult:
    """Wall-clock rate of exact scans; BLAS is pinned to one thread so
    ``threads`` is the only source of parallelism."""
    from threadpoolctl import threadpool_limits

    if n_queries < 1:
        raise ValueError("n_queries must be positive")
    rng = np.random.default_rng(seed)
    queries = rng.standard_normal((n_queries, index.dim))
    index.id_rank  # built once, outside the timed region
    with threadpool_limits(limits=1, user_api="blas"):
        search(index, queries[0], k, threads)  # warm-up
        t0 = time.perf_counter()
        for q in queries:
            search(index, q, k, threads)
        elapsed = time.perf_counter() - t0
    qps = n_queries / elapsed
    dps = qps * index.count
    return BenchResult(threads, n_queries, elapsed, qps, dps, qps / threads, dps / threads)
