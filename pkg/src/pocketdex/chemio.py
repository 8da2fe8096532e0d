"""Structure parsing, tokenization, pocket extraction and rigid transforms.

Two text formats are read and written:

* XYZ: a count line, a comment line, then ``element x y z`` rows.
* atoms table: CSV with header ``element,x,y,z`` plus optional ``plddt``,
  ``residue`` and ``resname`` columns.

Structures are immutable; coordinate arrays are marked read-only.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .errors import ParseError

# ~30 elements common in protein-ligand complex data.
ELEMENTS = (
    "H", "C", "N", "O", "F", "P", "S", "Cl", "Br", "I",
    "B", "Si", "Se", "Li", "Na", "K", "Mg", "Ca", "Mn", "Fe",
    "Co", "Ni", "Cu", "Zn", "Cd", "Hg", "Al", "As", "Pt", "Sn",
)
PAD, CLS, MASK, UNK = "[PAD]", "[CLS]", "[MASK]", "[UNK]"

# Metals that appear only as free ions in this kind of data, and halides that do
# when no partner atom sits within covalent range.
METAL_IONS = frozenset({"Li", "Na", "K", "Mg", "Ca", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Cd", "Hg"})
HALIDE_IONS = frozenset({"F", "Cl", "Br", "I"})
HALIDE_BOND_CUTOFF = 2.3
WATER_RESNAMES = frozenset({"HOH", "WAT", "H2O", "DOD"})


class Vocab:
    """Symbol to integer id table. Ids 0..3 are PAD, CLS, MASK, UNK."""

    def __init__(self, elements=ELEMENTS):
        self.symbols: tuple[str, ...] = (PAD, CLS, MASK, UNK, *elements)
        self._ids = {s: i for i, s in enumerate(self.symbols)}
        if len(self._ids) != len(self.symbols):
            raise ValueError("duplicate vocabulary symbols")

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._ids

    def id(self, symbol: str) -> int:
        return self._ids.get(normalize_element(symbol), self._ids[UNK])

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def cls_id(self) -> int:
        return self._ids[CLS]

    @property
    def mask_id(self) -> int:
        return self._ids[MASK]

    @property
    def unk_id(self) -> int:
        return self._ids[UNK]


DEFAULT_VOCAB = Vocab()


def normalize_element(symbol: str) -> str:
    s = symbol.strip()
    if s.startswith("["):
        return s
    return s[:1].upper() + s[1:].lower()


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Structure:
    """Atoms of a molecule or protein: element symbols, coordinates in Å, and
    optional per-atom annotations (``plddt``, ``residue_index``, ``resname``)."""

    elements: tuple[str, ...]
    coords: np.ndarray
    annotations: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        elements = tuple(normalize_element(e) for e in self.elements)
        coords = _frozen(self.coords, np.float64).reshape(-1, 3)
        if coords.shape[0] != len(elements):
            raise ValueError(f"{len(elements)} elements but {coords.shape[0]} coordinates")
        if not np.all(np.isfinite(coords)):
            raise ValueError("non-finite coordinate")
        ann = {}
        for key, values in self.annotations.items():
            dtype = object if key == "resname" else (np.int64 if key == "residue_index" else np.float64)
            arr = _frozen(values, dtype)
            if arr.shape != (len(elements),):
                raise ValueError(f"annotation {key!r} has shape {arr.shape}, expected ({len(elements)},)")
            ann[key] = arr
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "annotations", MappingProxyType(ann))

    def __len__(self) -> int:
        return len(self.elements)

    def select(self, index) -> "Structure":
        """Sub-structure at integer positions or a boolean mask, order preserved."""
        idx = np.arange(len(self))[index]
        return Structure(
            tuple(self.elements[i] for i in idx),
            self.coords[idx],
            {k: v[idx] for k, v in self.annotations.items()},
        )

    def with_coords(self, coords: np.ndarray) -> "Structure":
        return Structure(self.elements, coords, dict(self.annotations))


@dataclass(frozen=True, eq=False)
class TokenizedEntity:
    """Model input: position 0 is the [CLS] token at the atom centroid."""

    type_ids: np.ndarray
    coords: np.ndarray
    mask: np.ndarray
    cls_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "type_ids", _frozen(self.type_ids, np.int64))
        object.__setattr__(self, "coords", _frozen(self.coords, np.float64).reshape(-1, 3))
        object.__setattr__(self, "mask", _frozen(self.mask, bool))
        n = len(self.type_ids)
        if self.coords.shape[0] != n or self.mask.shape[0] != n:
            raise ValueError("type_ids, coords and mask lengths differ")

    def __len__(self) -> int:
        return len(self.type_ids)

    @property
    def n_atoms(self) -> int:
        return int(self.mask.sum()) - 1

    def replace(self, type_ids=None, coords=None) -> "TokenizedEntity":
        return TokenizedEntity(
            self.type_ids if type_ids is None else type_ids,
            self.coords if coords is None else coords,
            self.mask,
        )


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _frozen(self.rotation, np.float64)
        t = _frozen(self.translation, np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(r @ r.T, np.eye(3), rtol=0.0, atol=1e-8):
            raise ValueError("rotation is not orthogonal")
        if abs(np.linalg.det(r) - 1.0) > 1e-8:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def random(cls, rng: np.random.Generator, translation_scale: float = 10.0) -> "RigidTransform":
        # QR of a Gaussian matrix, sign-fixed, gives a Haar-uniform rotation.
        q, r = np.linalg.qr(rng.standard_normal((3, 3)))
        q = q * np.sign(np.diag(r))
        if np.linalg.det(q) < 0:
            q[:, 0] = -q[:, 0]
        return cls(q, rng.uniform(-translation_scale, translation_scale, 3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


def apply_rigid_transform(s: Structure, t: RigidTransform) -> Structure:
    return s.with_coords(t.apply(s.coords))


# -- parsing -------------------------------------------------
def _strip_solvent(elements, coords, annotations, keep_hydrogens: bool):
    n = len(elements)
    keep = np.ones(n, dtype=bool)
    resname = annotations.get("resname")
    if resname is not None:
        keep &= ~np.isin(np.asarray(resname, dtype=object), list(WATER_RESNAMES))
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    for i, e in enumerate(elements):
        if e in METAL_IONS:
            keep[i] = False
        elif e in HALIDE_IONS and n > 1:
            d = np.sqrt(((coords - coords[i]) ** 2).sum(axis=1))
            d[i] = np.inf
            if d.min() > HALIDE_BOND_CUTOFF:
                keep[i] = False
        elif e in HALIDE_IONS:
            keep[i] = False
    if not keep_hydrogens:
        keep &= np.array([e != "H" for e in elements], dtype=bool)
    return keep


def _finish(elements, coords, annotations, strip_solvent, keep_hydrogens) -> Structure:
    elements = [normalize_element(e) for e in elements]
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    keep = np.ones(len(elements), dtype=bool)
    if strip_solvent:
        keep = _strip_solvent(elements, coords, annotations, keep_hydrogens)
    elif not keep_hydrogens:
        keep = np.array([e != "H" for e in elements], dtype=bool)
    idx = np.flatnonzero(keep)
    return Structure(
        tuple(elements[i] for i in idx),
        coords[idx],
        {k: np.asarray(v, dtype=object if k == "resname" else None)[idx] for k, v in annotations.items()},
    )


def _float(token: str, line: int, what: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"non-numeric {what} {token!r}", line) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite {what} {token!r}", line)
    return value


def parse_xyz(text: str, *, strip_solvent: bool = True, keep_hydrogens: bool = True) -> Structure:
    lines = text.splitlines()
    if not lines or not text.strip():
        raise ParseError("empty file", 1)
    try:
        count = int(lines[0].strip())
    except ValueError:
        raise ParseError(f"malformed atom count {lines[0].strip()!r}", 1) from None
    if count < 1:
        raise ParseError(f"atom count must be positive, got {count}", 1)
    rows = lines[2:]
    while rows and not rows[-1].strip():
        rows.pop()
    if len(rows) != count:
        raise ParseError(f"atom count {count} but the atom block has {len(rows)} rows", 3)
    elements, coords = [], []
    for offset, row in enumerate(rows):
        lineno = offset + 3
        parts = row.split()
        if len(parts) < 4:
            raise ParseError(f"expected 'element x y z', got {row!r}", lineno)
        elements.append(parts[0])
        coords.append([_float(p, lineno, "coordinate") for p in parts[1:4]])
    return _finish(elements, coords, {}, strip_solvent, keep_hydrogens)


ATOMS_TABLE_REQUIRED = ("element", "x", "y", "z")
ATOMS_TABLE_OPTIONAL = ("plddt", "residue", "resname")


def parse_atoms_table(text: str, *, strip_solvent: bool = True, keep_hydrogens: bool = True) -> Structure:
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip().lower() for h in next(reader)]
    except StopIteration:
        raise ParseError("empty file", 1) from None
    missing = [c for c in ATOMS_TABLE_REQUIRED if c not in header]
    if missing:
        raise ParseError(f"missing column(s) {','.join(missing)}", 1)
    unknown = [c for c in header if c not in ATOMS_TABLE_REQUIRED + ATOMS_TABLE_OPTIONAL]
    if unknown:
        raise ParseError(f"unknown column(s) {','.join(unknown)}", 1)
    col = {name: header.index(name) for name in header}
    elements, coords = [], []
    plddt, residue, resname = [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or not any(cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
        elements.append(row[col["element"]].strip())
        coords.append([_float(row[col[c]], lineno, c) for c in ("x", "y", "z")])
        if "plddt" in col:
            plddt.append(_float(row[col["plddt"]], lineno, "plddt"))
        if "residue" in col:
            token = row[col["residue"]].strip()
            try:
                residue.append(int(token))
            except ValueError:
                raise ParseError(f"non-integer residue {token!r}", lineno) from None
        if "resname" in col:
            resname.append(row[col["resname"]].strip().upper())
    if not elements:
        raise ParseError("no atom rows", 2)
    annotations = {}
    if "plddt" in col:
        values = np.asarray(plddt)
        if values.max() > 1.0:
            values = values / 100.0
        annotations["plddt"] = values
    if "residue" in col:
        annotations["residue_index"] = np.asarray(residue, dtype=np.int64)
    if "resname" in col:
        annotations["resname"] = np.asarray(resname, dtype=object)
    return _finish(elements, coords, annotations, strip_solvent, keep_hydrogens)


def format_xyz(s: Structure, comment: str = "") -> str:
    rows = [str(len(s)), comment]
    rows += [f"{e} {x:.10f} {y:.10f} {z:.10f}" for e, (x, y, z) in zip(s.elements, s.coords)]
    return "\n".join(rows) + "\n"


def format_atoms_table(s: Structure) -> str:
    cols = list(ATOMS_TABLE_REQUIRED)
    if "plddt" in s.annotations:
        cols.append("plddt")
    if "residue_index" in s.annotations:
        cols.append("residue")
    if "resname" in s.annotations:
        cols.append("resname")
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(cols)
    for i, e in enumerate(s.elements):
        row = [e] + [f"{v:.10f}" for v in s.coords[i]]
        if "plddt" in s.annotations:
            row.append(f"{s.annotations['plddt'][i]:.6f}")
        if "residue_index" in s.annotations:
            row.append(str(int(s.annotations["residue_index"][i])))
        if "resname" in s.annotations:
            row.append(str(s.annotations["resname"][i]))
        w.writerow(row)
    return out.getvalue()


def read_structure(path, **kwargs) -> Structure:
    """Read a structure file, choosing the parser by extension (``.xyz`` or table)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".xyz":
        return parse_xyz(text, **kwargs)
    return parse_atoms_table(text, **kwargs)


# -- geometry -------------------------------------------------
def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = np.asarray(a, dtype=np.float64)[:, None, :] - np.asarray(b, dtype=np.float64)[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def extract_pocket(protein: Structure, ligand: Structure, radius: float = 6.0) -> Structure:
    """Protein atoms within ``radius`` Å (inclusive) of any ligand atom."""
    if len(protein) == 0 or len(ligand) == 0:
        raise ValueError("extract_pocket needs non-empty protein and ligand")
    keep = np.zeros(len(protein), dtype=bool)
    step = 4096
    for start in range(0, len(protein), step):
        d = pairwise_distances(protein.coords[start : start + step], ligand.coords)
        keep[start : start + step] = d.min(axis=1) <= radius
    return protein.select(keep)


def tokenize(s: Structure, vocab: Vocab = DEFAULT_VOCAB) -> TokenizedEntity:
    if len(s) == 0:
        raise ValueError("cannot tokenize an empty structure")
    ids = [vocab.cls_id] + [vocab.id(e) for e in s.elements]
    centroid = s.coords.mean(axis=0)
    coords = np.vstack([centroid[None, :], s.coords])
    return TokenizedEntity(np.array(ids), coords, np.ones(len(ids), dtype=bool))


def pad_batch(entities, length: int | None = None, vocab: Vocab = DEFAULT_VOCAB):
    """Stack entities into ``(type_ids, coords, mask)`` arrays padded to ``length``."""
    n = max(len(e) for e in entities)
    length = n if length is None else length
    if length < n:
        raise ValueError(f"pad length {length} shorter than longest entity {n}")
    b = len(entities)
    type_ids = np.full((b, length), vocab.pad_id, dtype=np.int64)
    coords = np.zeros((b, length, 3))
    mask = np.zeros((b, length), dtype=bool)
    for i, e in enumerate(entities):
        m = len(e)
        type_ids[i, :m] = e.type_ids
        coords[i, :m] = e.coords
        mask[i, :m] = e.mask
    return type_ids, coords, mask
