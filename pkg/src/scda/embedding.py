"""Slide data model, BGAP aggregation, stratified splitting and SCDA1 file I/O.

SCDA1 layout (little-endian)::

    b"SCDA" | u32 version=1 | u64 rows | u64 dims | rows*dims float32, row-major

A dataset is a JSON manifest plus one SCDA1 matrix with one row per slide
(``embeddings``) and, optionally, one SCDA1 patch matrix per slide (``bag``).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    BadMagic,
    DegenerateFraction,
    DimensionMismatch,
    EmptyBag,
    EmptyCell,
    ManifestError,
    NonFiniteInput,
    TruncatedFile,
    VersionMismatch,
    ZeroVector,
)

SCDA1_MAGIC = b"SCDA"
SCDA1_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")

TRAIN = "train"
TEST = "test"


@dataclass(frozen=True)
class SlideBag:
    slide_id: str
    center_id: str
    class_label: int
    patches: np.ndarray

    def __post_init__(self) -> None:
        patches = np.asarray(self.patches)
        if patches.ndim != 2 or patches.shape[0] == 0:
            raise EmptyBag(f"slide {self.slide_id!r} has no patches")
        if patches.shape[1] < 2:
            raise DimensionMismatch(f"slide {self.slide_id!r}: embedding dimension must be >= 2")
        object.__setattr__(self, "patches", patches)


@dataclass(frozen=True)
class SlideEmbedding:
    slide_id: str
    center_id: str
    class_label: int
    z: np.ndarray


@dataclass(frozen=True)
class SlideRecord:
    id: str
    center: str
    label: str
    n_patches: int = 0
    bag: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    """Class/center registries plus one record per slide.

    ``splits`` maps slide id to ``"train"`` or ``"test"``; when present it
    covers every slide.
    """

    classes: tuple[str, ...]
    centers: tuple[str, ...]
    slides: tuple[SlideRecord, ...]
    splits: Mapping[str, str] | None = None
    embeddings: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "centers", tuple(self.centers))
        object.__setattr__(self, "slides", tuple(self.slides))
        ids = [s.id for s in self.slides]
        if len(set(ids)) != len(ids):
            raise ManifestError("slide ids are not unique")
        class_set, center_set = set(self.classes), set(self.centers)
        for s in self.slides:
            if s.label not in class_set:
                raise ManifestError(f"slide {s.id!r}: unknown class {s.label!r}")
            if s.center not in center_set:
                raise ManifestError(f"slide {s.id!r}: unknown center {s.center!r}")
        if self.splits is not None:
            splits = dict(self.splits)
            if set(splits) != set(ids):
                raise ManifestError("split assignments must cover every slide exactly once")
            bad = {v for v in splits.values()} - {TRAIN, TEST}
            if bad:
                raise ManifestError(f"unknown split values: {sorted(bad)}")
            object.__setattr__(self, "splits", splits)

    @property
    def labels(self) -> np.ndarray:
        index = {name: i for i, name in enumerate(self.classes)}
        return np.array([index[s.label] for s in self.slides], dtype=np.int64)

    @property
    def center_index(self) -> np.ndarray:
        index = {name: i for i, name in enumerate(self.centers)}
        return np.array([index[s.center] for s in self.slides], dtype=np.int64)

    def split_mask(self, which: str) -> np.ndarray:
        if self.splits is None:
            raise ManifestError("manifest has no split assignments")
        return np.array([self.splits[s.id] == which for s in self.slides])

    def to_dict(self) -> dict:
        slides = []
        for s in self.slides:
            rec = {"id": s.id, "center": s.center, "class": s.label, "n_patches": s.n_patches}
            if s.bag is not None:
                rec["bag"] = s.bag
            slides.append(rec)
        out: dict = {"classes": list(self.classes), "centers": list(self.centers), "slides": slides}
        if self.embeddings is not None:
            out["embeddings"] = self.embeddings
        if self.splits is not None:
            out["splits"] = {s.id: self.splits[s.id] for s in self.slides}
        return out

    @classmethod
    def from_dict(cls, doc: Mapping) -> "DatasetManifest":
        try:
            slides = tuple(
                SlideRecord(
                    id=str(r["id"]),
                    center=str(r["center"]),
                    label=str(r["class"]),
                    n_patches=int(r.get("n_patches", 0)),
                    bag=r.get("bag"),
                )
                for r in doc["slides"]
            )
            return cls(
                classes=tuple(doc["classes"]),
                centers=tuple(doc["centers"]),
                slides=slides,
                splits=doc.get("splits"),
                embeddings=doc.get("embeddings"),
            )
        except KeyError as exc:
            raise ManifestError(f"manifest is missing field {exc.args[0]!r}") from None


@dataclass(frozen=True)
class EmbeddingTable:
    """Slide-level embedding matrix with aligned provenance arrays.

    This is the in-memory form every downstream module consumes. ``labels``
    and ``centers`` are registry indexes.
    """

    ids: tuple[str, ...]
    labels: np.ndarray
    centers: np.ndarray
    z: np.ndarray
    class_names: tuple[str, ...] = field(default=())
    center_names: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        z = np.asarray(self.z)
        if z.ndim != 2 or z.shape[0] != len(self.ids):
            raise DimensionMismatch(f"embedding matrix shape {z.shape} does not match {len(self.ids)} slides")
        if len(self.labels) != len(self.ids) or len(self.centers) != len(self.ids):
            raise DimensionMismatch("labels/centers length differs from slide count")
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        object.__setattr__(self, "centers", np.asarray(self.centers, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.z.shape[1])

    def subset(self, mask_or_index) -> "EmbeddingTable":
        idx = np.asarray(mask_or_index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return replace(
            self,
            ids=tuple(self.ids[i] for i in idx),
            labels=self.labels[idx],
            centers=self.centers[idx],
            z=self.z[idx],
        )

    def with_z(self, z: np.ndarray) -> "EmbeddingTable":
        return replace(self, z=z)

    def in_centers(self, centers: Iterable[int]) -> "EmbeddingTable":
        return self.subset(np.isin(self.centers, list(centers)))

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, z: np.ndarray) -> "EmbeddingTable":
        return cls(
            ids=tuple(s.id for s in manifest.slides),
            labels=manifest.labels,
            centers=manifest.center_index,
            z=z,
            class_names=manifest.classes,
            center_names=manifest.centers,
        )


def bgap(bag: SlideBag) -> SlideEmbedding:
    """Parameter-free mean of the patch embeddings of one slide."""
    patches = np.asarray(bag.patches, dtype=np.float64)
    if patches.shape[0] == 0:
        raise EmptyBag(f"slide {bag.slide_id!r} has no patches")
    if not np.all(np.isfinite(patches)):
        raise NonFiniteInput(f"slide {bag.slide_id!r} contains non-finite patch values")
    # Sorting each column makes the sum independent of row order bit for bit.
    z = np.sort(patches, axis=0).sum(axis=0) / patches.shape[0]
    return SlideEmbedding(bag.slide_id, bag.center_id, bag.class_label, z)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` (or every row of a matrix) to unit Euclidean norm."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ZeroVector("cannot normalize a vector with norm < 1e-12")
    return v / norms


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(manifest: DatasetManifest, train_fraction: float, seed: int) -> DatasetManifest:
    """Stratified train/test split over every (class, center) cell.

    A cell of size n gets round(train_fraction * n) training slides, at least
    one, and leaves at least one test slide whenever n >= 2.
    """
    if not 0.0 < train_fraction < 1.0:
        raise DegenerateFraction(f"train_fraction must lie in (0, 1), got {train_fraction}")
    labels = manifest.labels
    centers = manifest.center_index
    rng = np.random.default_rng(seed)
    splits: dict[str, str] = {}
    for ci in range(len(manifest.classes)):
        for hi in range(len(manifest.centers)):
            cell = np.flatnonzero((labels == ci) & (centers == hi))
            n = len(cell)
            if n == 0:
                raise EmptyCell(f"no slides for class {manifest.classes[ci]!r} at center {manifest.centers[hi]!r}")
            n_train = _round_half_up(train_fraction * n)
            n_train = max(1, n_train)
            if n >= 2:
                n_train = min(n_train, n - 1)
            order = cell[rng.permutation(n)]
            for rank, i in enumerate(order):
                splits[manifest.slides[i].id] = TRAIN if rank < n_train else TEST
    return replace(manifest, splits=splits)


# --------------------------------------------------------------------------
# SCDA1 binary matrices


def write_matrix(path: str | Path, matrix: np.ndarray) -> None:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {m.shape}")
    data = np.ascontiguousarray(m, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SCDA1_MAGIC, SCDA1_VERSION, m.shape[0], m.shape[1]))
        fh.write(data.tobytes())


def read_matrix(path: str | Path, expected_dims: int | None = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != SCDA1_MAGIC:
        raise BadMagic(f"{path}: not an SCDA1 file")
    if len(raw) < _HEADER.size:
        raise TruncatedFile(f"{path}: header is truncated")
    _, version, rows, dims = _HEADER.unpack_from(raw)
    if version != SCDA1_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {SCDA1_VERSION}")
    if expected_dims is not None and dims != expected_dims:
        raise DimensionMismatch(f"{path}: dims {dims}, expected {expected_dims}")
    need = rows * dims * 4
    body = raw[_HEADER.size :]
    if len(body) < need:
        raise TruncatedFile(f"{path}: header declares {rows}x{dims} values, file holds {len(body) // 4}")
    if len(body) > need:
        raise DimensionMismatch(f"{path}: {len(body) - need} trailing bytes after matrix body")
    return np.frombuffer(body, dtype="<f4").reshape(rows, dims).astype(np.float32)


def write_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> DatasetManifest:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from None
    return DatasetManifest.from_dict(doc)


def save_embeddings(manifest: DatasetManifest, embeddings: np.ndarray, path: str | Path) -> None:
    """Write ``manifest`` as JSON at ``path`` and the slide matrix beside it.

    Values are stored as float32, so a float32 matrix round-trips bit-exactly.
    """
    path = Path(path)
    embeddings = np.asarray(embeddings)
    if embeddings.ndim != 2 or embeddings.shape[0] != len(manifest.slides):
        raise DimensionMismatch(
            f"embedding matrix shape {embeddings.shape} does not match {len(manifest.slides)} slides"
        )
    name = manifest.embeddings or path.with_suffix(".scda").name
    write_matrix(path.parent / name, embeddings)
    write_manifest(path, replace(manifest, embeddings=name))


def load_embeddings(path: str | Path) -> tuple[DatasetManifest, np.ndarray]:
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.embeddings is None:
        raise ManifestError(f"{path}: manifest does not reference an embeddings file")
    matrix = read_matrix(path.parent / manifest.embeddings)
    if matrix.shape[0] != len(manifest.slides):
        raise DimensionMismatch(f"{path}: {matrix.shape[0]} embedding rows for {len(manifest.slides)} slides")
    return manifest, matrix


def load_bags(path: str | Path) -> list[SlideBag]:
    """Read every per-slide patch matrix referenced by the manifest at ``path``."""
    path = Path(path)
    manifest = read_manifest(path)
    index = {name: i for i, name in enumerate(manifest.classes)}
    bags = []
    dims = None
    for rec in manifest.slides:
        if rec.bag is None:
            raise ManifestError(f"slide {rec.id!r} has no bag file")
        patches = read_matrix(path.parent / rec.bag, expected_dims=dims)
        dims = patches.shape[1]
        bags.append(SlideBag(rec.id, rec.center, index[rec.label], patches))
    return bags


def aggregate(bags: Sequence[SlideBag]) -> np.ndarray:
    """BGAP every bag; rows follow the order of ``bags``."""
    if not bags:
        raise EmptyBag("no bags to aggregate")
    dims = bags[0].patches.shape[1]
    rows = []
    for bag in bags:
        if bag.patches.shape[1] != dims:
            raise DimensionMismatch(f"slide {bag.slide_id!r} has dimension {bag.patches.shape[1]}, expected {dims}")
        rows.append(bgap(bag).z)
    return np.vstack(rows)
