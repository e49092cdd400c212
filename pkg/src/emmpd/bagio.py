"""Patient bags, text banks and dataset manifests, plus a seeded generator.

Binary layouts (little-endian):

bag file::

    b"EMPD" | u32 version=1 | u32 N | u32 d | u32 num_slides
    N x (u16 slide_index, i32 gx, i32 gy)
    N*d float32, row-major

text bank::

    b"EMPT" | u32 version=1 | u32 C | u32 d | C*d float32

The manifest is a JSON document; labels live there, not in bag files.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BAG_MAGIC = b"EMPD"
TEXT_MAGIC = b"EMPT"
FORMAT_VERSION = 1
PROMPT_INIT_SCALE = 0.02
DEFAULT_PROMPTS = 4

_BAG_HEADER = struct.Struct("<4sIIII")
_TEXT_HEADER = struct.Struct("<4sIII")
_COORD_DTYPE = np.dtype([("slide", "<u2"), ("gx", "<i4"), ("gy", "<i4")])


class BagFormatError(ValueError):
    code = "format"


class BadMagicError(BagFormatError):
    code = "bad-magic"


class VersionError(BagFormatError):
    code = "version"


class TruncatedError(BagFormatError):
    code = "truncated"


class EmptyBagError(BagFormatError):
    code = "empty-bag"


class DimensionMismatchError(BagFormatError):
    code = "dim-mismatch"


class InvalidBagError(BagFormatError):
    code = "invalid-bag"


@dataclass
class PatchBag:
    patient_id: str
    embeddings: np.ndarray          # (N, d)
    slide: np.ndarray               # (N,) small ints
    gx: np.ndarray                  # (N,) grid column
    gy: np.ndarray                  # (N,) grid row
    label: np.ndarray | None = None  # (C,) of {0, 1}

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    @property
    def num_slides(self) -> int:
        return int(self.slide.max()) + 1 if self.n else 0

    def coords(self) -> np.ndarray:
        return np.stack([self.slide, self.gx, self.gy], axis=1)

    def subset(self, index) -> "PatchBag":
        index = np.asarray(index, dtype=np.intp)
        return PatchBag(self.patient_id, self.embeddings[index], self.slide[index],
                        self.gx[index], self.gy[index], self.label)

    def validate(self, d: int | None = None, num_classes: int | None = None) -> None:
        if self.n < 1:
            raise EmptyBagError(f"bag {self.patient_id!r} has no patches")
        if self.embeddings.ndim != 2:
            raise InvalidBagError("embeddings must be a 2-D array")
        if d is not None and self.d != d:
            raise DimensionMismatchError(f"bag {self.patient_id!r} has d={self.d}, expected {d}")
        for arr in (self.slide, self.gx, self.gy):
            if arr.shape != (self.n,):
                raise InvalidBagError("coordinate arrays must have one entry per patch")
        keys = set(zip(self.slide.tolist(), self.gx.tolist(), self.gy.tolist()))
        if len(keys) != self.n:
            raise InvalidBagError(f"bag {self.patient_id!r} repeats a (slide, gx, gy) cell")
        if not np.isfinite(self.embeddings).all():
            raise InvalidBagError(f"bag {self.patient_id!r} has non-finite embeddings")
        if self.label is not None and num_classes is not None and len(self.label) != num_classes:
            raise DimensionMismatchError(
                f"label length {len(self.label)} does not match C={num_classes}")


def write_bag(bag: PatchBag, path) -> None:
    bag.validate()
    coords = np.empty(bag.n, dtype=_COORD_DTYPE)
    coords["slide"] = bag.slide
    coords["gx"] = bag.gx
    coords["gy"] = bag.gy
    with open(path, "wb") as fh:
        fh.write(_BAG_HEADER.pack(BAG_MAGIC, FORMAT_VERSION, bag.n, bag.d, bag.num_slides))
        fh.write(coords.tobytes())
        fh.write(np.ascontiguousarray(bag.embeddings, dtype="<f4").tobytes())


def read_bag(path, d: int | None = None, patient_id: str | None = None,
             dtype=np.float64) -> PatchBag:
    """Load a bag file; embeddings are widened to ``dtype`` (float64 by default)."""
    raw = Path(path).read_bytes()
    if len(raw) < _BAG_HEADER.size:
        if raw[:4] and raw[:4] != BAG_MAGIC[:len(raw[:4])]:
            raise BadMagicError(f"{path}: not a bag file")
        raise TruncatedError(f"{path}: header is truncated")
    magic, version, n, dim, _num_slides = _BAG_HEADER.unpack_from(raw)
    if magic != BAG_MAGIC:
        raise BadMagicError(f"{path}: magic {magic!r} != {BAG_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: version {version} unsupported")
    if n == 0:
        raise EmptyBagError(f"{path}: N=0")
    if d is not None and dim != d:
        raise DimensionMismatchError(f"{path}: d={dim}, manifest says {d}")
    off = _BAG_HEADER.size
    need = off + n * _COORD_DTYPE.itemsize + n * dim * 4
    if len(raw) < need:
        raise TruncatedError(f"{path}: payload has {len(raw)} bytes, need {need}")
    coords = np.frombuffer(raw, dtype=_COORD_DTYPE, count=n, offset=off)
    off += n * _COORD_DTYPE.itemsize
    emb = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=off).reshape(n, dim)
    pid = patient_id if patient_id is not None else Path(path).stem
    bag = PatchBag(pid, emb.astype(dtype), coords["slide"].astype(np.int64),
                   coords["gx"].astype(np.int64), coords["gy"].astype(np.int64))
    bag.validate()
    return bag


@dataclass
class TextBank:
    """Frozen class text rows plus the recipe for the learnable prompt rows."""

    frozen: np.ndarray          # (C, d)
    t: int = DEFAULT_PROMPTS
    seed: int = 0
    scale: float = PROMPT_INIT_SCALE

    @property
    def c(self) -> int:
        return self.frozen.shape[0]

    @property
    def d(self) -> int:
        return self.frozen.shape[1]

    def init_learnable(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 0x9A3B])
        return rng.uniform(-self.scale, self.scale, size=(self.t, self.d))

    def prompt_matrix(self, learnable: np.ndarray | None = None) -> np.ndarray:
        """Stack frozen rows over learnable rows: shape (C + t, d)."""
        if learnable is None:
            learnable = self.init_learnable()
        return np.vstack([self.frozen, learnable]) if self.t else self.frozen.copy()


def write_text_bank(frozen: np.ndarray, path) -> None:
    frozen = np.asarray(frozen)
    c, d = frozen.shape
    with open(path, "wb") as fh:
        fh.write(_TEXT_HEADER.pack(TEXT_MAGIC, FORMAT_VERSION, c, d))
        fh.write(np.ascontiguousarray(frozen, dtype="<f4").tobytes())


def load_text_bank(path, t: int = DEFAULT_PROMPTS, seed: int = 0,
                   num_classes: int | None = None, d: int | None = None) -> TextBank:
    raw = Path(path).read_bytes()
    if len(raw) < _TEXT_HEADER.size:
        raise TruncatedError(f"{path}: header is truncated")
    magic, version, c, dim = _TEXT_HEADER.unpack_from(raw)
    if magic != TEXT_MAGIC:
        raise BadMagicError(f"{path}: magic {magic!r} != {TEXT_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: version {version} unsupported")
    if num_classes is not None and c != num_classes:
        raise DimensionMismatchError(f"{path}: text bank has C={c}, manifest says {num_classes}")
    if d is not None and dim != d:
        raise DimensionMismatchError(f"{path}: text bank has d={dim}, manifest says {d}")
    need = _TEXT_HEADER.size + c * dim * 4
    if len(raw) < need:
        raise TruncatedError(f"{path}: payload has {len(raw)} bytes, need {need}")
    frozen = np.frombuffer(raw, dtype="<f4", count=c * dim, offset=_TEXT_HEADER.size)
    if t < 0:
        raise ValueError("t must be >= 0")
    return TextBank(frozen.reshape(c, dim).astype(np.float64), t=t, seed=seed)


# ---------------------------------------------------------------- manifest

@dataclass
class BagEntry:
    patient_id: str
    path: str
    label: list[int]


@dataclass
class DatasetManifest:
    d: int
    C: int
    t: int = DEFAULT_PROMPTS
    task_mode: str = "multilabel"
    class_names: list[str] = field(default_factory=list)
    splits: dict[str, list[BagEntry]] = field(default_factory=dict)
    text_bank: str | None = None
    root: Path = field(default=Path("."), repr=False)

    def validate(self) -> None:
        if self.C < 2:
            raise ValueError("a manifest needs at least two classes")
        if self.task_mode not in ("multilabel", "multiclass"):
            raise ValueError(f"unknown task_mode {self.task_mode!r}")
        if self.class_names and len(self.class_names) != self.C:
            raise ValueError("class_names length must equal C")
        seen: dict[str, str] = {}
        for split, entries in self.splits.items():
            for e in entries:
                if e.patient_id in seen and seen[e.patient_id] != split:
                    raise ValueError(
                        f"patient {e.patient_id!r} appears in splits {seen[e.patient_id]!r} and {split!r}")
                seen[e.patient_id] = split
                if len(e.label) != self.C:
                    raise ValueError(f"label of {e.patient_id!r} has length {len(e.label)}, C={self.C}")
                if self.task_mode == "multiclass" and sum(e.label) != 1:
                    raise ValueError(f"multiclass label of {e.patient_id!r} is not one-hot")

    def resolve(self, entry: BagEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def load_split(self, split: str) -> list[PatchBag]:
        bags = []
        for e in self.splits.get(split, []):
            bag = read_bag(self.resolve(e), d=self.d, patient_id=e.patient_id)
            bag.label = np.asarray(e.label, dtype=np.float64)
            bag.validate(self.d, self.C)
            bags.append(bag)
        return bags

    def load_text_bank(self, seed: int = 0, t: int | None = None) -> TextBank:
        if self.text_bank is None:
            raise ValueError("manifest does not name a text bank")
        path = Path(self.text_bank)
        path = path if path.is_absolute() else self.root / path
        return load_text_bank(path, t=self.t if t is None else t, seed=seed,
                              num_classes=self.C, d=self.d)

    def to_dict(self) -> dict:
        return {
            "d": self.d, "C": self.C, "t": self.t, "task_mode": self.task_mode,
            "class_names": list(self.class_names), "text_bank": self.text_bank,
            "splits": {k: [{"patient_id": e.patient_id, "path": e.path, "label": list(e.label)}
                           for e in v] for k, v in self.splits.items()},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    splits = {k: [BagEntry(e["patient_id"], e["path"], [int(x) for x in e["label"]]) for e in v]
              for k, v in doc.get("splits", {}).items()}
    m = DatasetManifest(int(doc["d"]), int(doc["C"]), int(doc.get("t", DEFAULT_PROMPTS)),
                        doc.get("task_mode", "multilabel"), list(doc.get("class_names", [])),
                        splits, doc.get("text_bank"), root=path.parent)
    m.validate()
    return m


# ---------------------------------------------------------------- synthetic data

@dataclass
class SyntheticSpec:
    """Recipe for a seeded synthetic cohort.

    Non-duplicate patches are rows of one shared orthonormal prototype
    dictionary (orthogonal to the class signatures), each slide using distinct
    prototypes. Every such pair is therefore equally similar, so only planted
    duplicates and planted signature clusters look redundant to the window
    compressor. Class evidence is a small grid cluster with a strong component
    along a class signature. With ``decoy_prob > 0`` some slides also carry a
    weak slide-wide component along a class they are not positive for.
    """

    num_patients: int = 200
    slides_per_patient: tuple[int, int] = (2, 4)
    patches_per_slide: tuple[int, int] = (80, 120)
    d: int = 128
    C: int = 3
    dup_ratio: float = 0.6
    signature_strength: float = 0.8
    decoy_strength: float = 0.3
    decoy_prob: float = 0.0
    noise_scale: float = 0.002      # duplicate perturbation, relative to the source norm
    cluster_size: tuple[int, int] = (2, 3)
    prevalence: float = 0.3
    task_mode: str = "multilabel"
    block: int = 8                  # tile block; duplicates stay inside their source's block
    block_fill: int = 48
    feature_scale: float = 1.0     # patch norms ~ feature_scale * sqrt(d)
    split_ratio: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.dup_ratio <= 1.0:
            raise ValueError(f"dup_ratio must lie in [0, 1], got {self.dup_ratio}")
        if not 0.0 <= self.noise_scale <= 0.01:
            raise ValueError("noise_scale must lie in [0, 0.01]")
        for name in ("num_patients", "d", "C", "block", "block_fill"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.C < 2:
            raise ValueError("C must be >= 2")
        for name in ("slides_per_patient", "patches_per_slide", "cluster_size"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} must be a range with 1 <= lo <= hi")
        if self.block_fill > self.block * self.block:
            raise ValueError("block_fill cannot exceed block * block")
        # non-duplicates of a slide need distinct prototypes from the d - C available
        hi = self.patches_per_slide[1]
        worst_base = hi - int(self.dup_ratio * hi) + -(-hi // self.block_fill)
        if worst_base > self.d - self.C:
            raise ValueError(
                f"slides may hold {worst_base} non-duplicate patches but d={self.d} "
                f"leaves room for only {self.d - self.C}")
        if self.signature_strength ** 2 + (self.C - 1) * self.decoy_strength ** 2 >= 1.0:
            raise ValueError("signature_strength and decoy_strength are too large for unit-norm patches")
        if self.task_mode not in ("multilabel", "multiclass"):
            raise ValueError(f"unknown task_mode {self.task_mode!r}")


def _class_signatures(spec: SyntheticSpec, rng) -> np.ndarray:
    g = rng.standard_normal((spec.d, spec.C))
    q, _ = np.linalg.qr(g)
    return q.T  # (C, d) orthonormal rows


def _prototypes(signatures: np.ndarray, rng) -> np.ndarray:
    """Orthonormal tissue prototypes spanning the complement of the signatures."""
    c, d = signatures.shape
    g = rng.standard_normal((d, d - c))
    g -= signatures.T @ (signatures @ g)
    q, _ = np.linalg.qr(g)
    q -= signatures.T @ (signatures @ q)
    q, _ = np.linalg.qr(q)
    return q.T  # (d - C, d)


def _layout_slide(n: int, spec: SyntheticSpec, rng):
    """Grid cells for n patches, filled block by block; returns (gx, gy, block_id)."""
    b = spec.block
    nblocks = -(-n // spec.block_fill)
    counts = np.full(nblocks, n // nblocks)
    counts[: n % nblocks] += 1
    per_row = int(np.ceil(np.sqrt(nblocks)))
    gx, gy, blk = [], [], []
    for k, m in enumerate(counts):
        bx, by = k % per_row, k // per_row
        cells = rng.choice(b * b, size=m, replace=False)
        gx.extend(bx * b + cells % b)
        gy.extend(by * b + cells // b)
        blk.extend([k] * m)
    return np.array(gx), np.array(gy), np.array(blk)


def _draw_labels(spec: SyntheticSpec, rng) -> np.ndarray:
    if spec.task_mode == "multiclass":
        y = np.zeros(spec.C)
        y[rng.integers(spec.C)] = 1
        return y
    y = (rng.random(spec.C) < spec.prevalence).astype(float)
    return y


def _make_patient(pid: str, label: np.ndarray, signatures: np.ndarray,
                  prototypes: np.ndarray, spec: SyntheticSpec, rng) -> PatchBag:
    n_slides = int(rng.integers(spec.slides_per_patient[0], spec.slides_per_patient[1] + 1))
    positives = np.flatnonzero(label)
    planted = {s: set() for s in range(n_slides)}
    for c in positives:
        k = int(rng.integers(1, min(2, n_slides) + 1))
        for s in rng.choice(n_slides, size=k, replace=False):
            planted[int(s)].add(int(c))

    emb, sl, gxs, gys = [], [], [], []
    for s in range(n_slides):
        n = int(rng.integers(spec.patches_per_slide[0], spec.patches_per_slide[1] + 1))
        gx, gy, blk = _layout_slide(n, spec, rng)
        is_dup = np.zeros(n, dtype=bool)
        for k in np.unique(blk):
            members = np.flatnonzero(blk == k)
            n_dup = min(int(round(spec.dup_ratio * len(members))), len(members) - 1)
            is_dup[rng.choice(members, size=n_dup, replace=False)] = True
        base = np.flatnonzero(~is_dup)

        offset = np.zeros(spec.d)
        for c in range(spec.C):
            if c not in planted[s] and rng.random() < spec.decoy_prob:
                offset += spec.decoy_strength * signatures[c]

        sig = np.zeros((n, spec.d))
        free = np.ones(n, dtype=bool)
        for c in sorted(planted[s]):
            centre = base[rng.integers(len(base))]
            same = base[(blk[base] == blk[centre]) & free[base]]
            if same.size == 0:
                continue
            dist = np.hypot(gx[same] - gx[centre], gy[same] - gy[centre])
            size = int(rng.integers(spec.cluster_size[0], spec.cluster_size[1] + 1))
            cluster = same[np.lexsort((same, dist))[:size]]
            sig[cluster] = spec.signature_strength * signatures[c]
            free[cluster] = False

        # distinct prototypes per slide keep every non-duplicate pair equally similar
        frame = prototypes[rng.choice(len(prototypes), size=len(base), replace=False)]
        vec = np.zeros((n, spec.d))
        extra = sig[base] + offset
        resid = 1.0 - (extra ** 2).sum(axis=1)
        vec[base] = np.sqrt(resid)[:, None] * frame + extra

        for i in np.flatnonzero(is_dup):
            pool = base[blk[base] == blk[i]]
            dist = np.hypot(gx[pool] - gx[i], gy[pool] - gy[i])
            src = pool[np.lexsort((pool, dist))[0]]
            noise = rng.standard_normal(spec.d)
            noise *= spec.noise_scale / np.linalg.norm(noise)
            vec[i] = vec[src] + noise

        vec *= spec.feature_scale * np.sqrt(spec.d) * rng.uniform(0.9, 1.1, size=(n, 1))
        order = np.lexsort((gx, gy))
        emb.append(vec[order])
        gxs.append(gx[order])
        gys.append(gy[order])
        sl.append(np.full(n, s))
    return PatchBag(pid, np.vstack(emb), np.concatenate(sl), np.concatenate(gxs),
                    np.concatenate(gys), label)


def generate_synthetic(spec: SyntheticSpec, out_dir, class_names=None) -> DatasetManifest:
    """Write bags, a text bank and ``manifest.json`` into ``out_dir``.

    Output is a pure function of ``spec``: the same spec yields byte-identical files.
    """
    spec.validate()
    out = Path(out_dir)
    (out / "bags").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    signatures = _class_signatures(spec, rng)
    prototypes = _prototypes(signatures, rng)

    labels = [_draw_labels(spec, rng) for _ in range(spec.num_patients)]
    patient_rngs = rng.spawn(spec.num_patients)
    entries = []
    width = len(str(spec.num_patients - 1))
    for i, (y, prng) in enumerate(zip(labels, patient_rngs)):
        pid = f"P{i:0{width}d}"
        bag = _make_patient(pid, y, signatures, prototypes, spec, prng)
        rel = os.path.join("bags", f"{pid}.bag")
        write_bag(bag, out / rel)
        entries.append(BagEntry(pid, rel, [int(v) for v in y]))

    text_rng = np.random.default_rng([spec.seed, 0x7E47])
    write_text_bank(text_rng.standard_normal((spec.C, spec.d)) / np.sqrt(spec.d), out / "text_bank.bin")

    order = np.random.default_rng([spec.seed, 0x5EED]).permutation(spec.num_patients)
    n_train = int(round(spec.split_ratio[0] * spec.num_patients))
    n_val = int(round(spec.split_ratio[1] * spec.num_patients))
    parts = {"train": order[:n_train], "val": order[n_train:n_train + n_val],
             "test": order[n_train + n_val:]}
    manifest = DatasetManifest(
        d=spec.d, C=spec.C, task_mode=spec.task_mode,
        class_names=list(class_names or [f"class{c}" for c in range(spec.C)]),
        splits={k: [entries[i] for i in sorted(v)] for k, v in parts.items()},
        text_bank="text_bank.bin", root=out,
    )
    manifest.validate()
    manifest.save(out / "manifest.json")
    return manifest
