"""Synthetic multi-center slide embeddings and the evaluation harnesses.

Generative model for a slide of class s at center h::

    slide_mean = R_h @ m_s + t_h + jitter,   jitter ~ N(0, slide_jitter^2 I)
    patch      = slide_mean + N(0, patch_noise_sigma^2 I)

The class means m_s are unit vectors with equal pairwise angle
``class_separation`` (degrees). R_h is a rotation obtained by moving a
fraction ``center_shift`` along the geodesic from the identity toward a
random rotation, and t_h is a random offset of norm
``center_shift * center_translation``.
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.linalg import expm, logm
from scipy.stats import special_ortho_group

from .adapter import TrainConfig, train, transform
from .embedding import (
    DatasetManifest,
    EmbeddingTable,
    SlideBag,
    SlideRecord,
    aggregate,
    l2_normalize,
    split_dataset,
)
from .errors import InfeasibleSeparation, NotEnoughShots
from .prototypes import ConfusionMatrix, balanced_accuracy, build_prototypes, evaluate

# Per-class slide counts of the two-center skin cohort this benchmark mirrors.
COHORT_COUNTS = ((31, 71), (25, 26), (73, 95), (17, 44), (49, 73), (44, 60))
COHORT_CLASSES = ("lm", "lms", "df", "dfs", "mel", "fxa")

REPORT_COLUMNS = ("method", "train_centers", "test_centers", "k", "seed", "bacc")
AGGREGATE_COLUMNS = ("method", "train_centers", "test_centers", "k", "n_seeds", "mean", "std")


@dataclass(frozen=True)
class SynthConfig:
    dim: int = 32
    n_classes: int = 6
    n_centers: int = 2
    slides_per_cell: int | tuple[tuple[int, ...], ...] = COHORT_COUNTS
    patches_per_slide: tuple[int, int] = (20, 80)
    class_separation: float = 40.0
    center_shift: float = 0.5
    center_translation: float = 2.0
    slide_jitter: float = 0.1
    patch_noise_sigma: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.dim < 4 or self.n_classes < 2 or self.n_centers < 1:
            raise ValueError("need dim >= 4, n_classes >= 2, n_centers >= 1")
        magnitudes = (self.class_separation, self.center_shift, self.center_translation,
                      self.slide_jitter, self.patch_noise_sigma)
        if min(magnitudes) < 0:
            raise ValueError("all magnitudes must be >= 0")
        lo, hi = self.patches_per_slide
        if not 1 <= lo <= hi:
            raise ValueError("patches_per_slide must be a range 1 <= lo <= hi")
        if not isinstance(self.slides_per_cell, int):
            table = tuple(tuple(int(v) for v in row) for row in self.slides_per_cell)
            if len(table) != self.n_classes or any(len(r) != self.n_centers for r in table):
                raise ValueError("slides_per_cell table must be n_classes x n_centers")
            object.__setattr__(self, "slides_per_cell", table)

    def cell_count(self, s: int, h: int) -> int:
        if isinstance(self.slides_per_cell, int):
            return self.slides_per_cell
        return self.slides_per_cell[s][h]

    @property
    def class_names(self) -> tuple[str, ...]:
        if self.n_classes == len(COHORT_CLASSES):
            return COHORT_CLASSES
        return tuple(f"class{i}" for i in range(self.n_classes))

    @property
    def center_names(self) -> tuple[str, ...]:
        return tuple(f"H{i + 1}" for i in range(self.n_centers))


@dataclass(frozen=True)
class SyntheticDataset:
    manifest: DatasetManifest
    bags: tuple[SlideBag, ...]
    table: EmbeddingTable
    class_means: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray


def class_means(n_classes: int, dim: int, separation_deg: float, rng: np.random.Generator,
                max_tries: int = 10_000) -> np.ndarray:
    """Unit vectors whose pairwise angles are all at least ``separation_deg``.

    Up to 90 degrees the means sit on a cone around a random axis with every
    pairwise angle exactly equal to the separation; wider separations fall
    back to rejection sampling.
    """
    sep = np.radians(separation_deg)
    if separation_deg <= 90.0 and n_classes <= dim - 1:
        basis, _ = np.linalg.qr(rng.standard_normal((dim, n_classes + 1)))
        axis, spokes = basis[:, 0], basis[:, 1:].T
        half = np.arccos(np.sqrt(np.cos(sep)))
        return np.cos(half) * axis + np.sin(half) * spokes
    means: list[np.ndarray] = []
    tries = 0
    while len(means) < n_classes:
        tries += 1
        if tries > max_tries:
            raise InfeasibleSeparation(
                f"could not place {n_classes} unit vectors {separation_deg} degrees apart in {dim} dims"
            )
        v = l2_normalize(rng.standard_normal(dim))
        if all(np.dot(v, m) <= np.cos(sep) + 1e-12 for m in means):
            means.append(v)
    return np.vstack(means)


def partial_rotation(dim: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Rotation ``fraction`` of the way along the geodesic from I to a random rotation."""
    target = special_ortho_group.rvs(dim, random_state=rng)
    log = np.real(logm(target))
    log = 0.5 * (log - log.T)
    return expm(fraction * log)


def generate(config: SynthConfig) -> SyntheticDataset:
    rng = np.random.default_rng(config.seed)
    means = class_means(config.n_classes, config.dim, config.class_separation, rng)
    rotations = np.stack([partial_rotation(config.dim, config.center_shift, rng) for _ in range(config.n_centers)])
    offsets = rng.standard_normal((config.n_centers, config.dim))
    offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)
    translations = offsets * config.center_shift * config.center_translation

    classes, centers = config.class_names, config.center_names
    records, bags = [], []
    lo, hi = config.patches_per_slide
    for s in range(config.n_classes):
        for h in range(config.n_centers):
            center_mean = rotations[h] @ means[s] + translations[h]
            for i in range(config.cell_count(s, h)):
                slide_id = f"{centers[h]}-{classes[s]}-{i:04d}"
                mean = center_mean + config.slide_jitter * rng.standard_normal(config.dim)
                n = int(rng.integers(lo, hi + 1))
                patches = mean + config.patch_noise_sigma * rng.standard_normal((n, config.dim))
                bags.append(SlideBag(slide_id, centers[h], s, patches.astype(np.float32)))
                records.append(SlideRecord(slide_id, centers[h], classes[s], n, f"bags/{slide_id}.scda"))
    manifest = DatasetManifest(classes, centers, tuple(records))
    table = EmbeddingTable.from_manifest(manifest, aggregate(bags))
    return SyntheticDataset(manifest, tuple(bags), table, means, rotations, translations)


def generate_split(config: SynthConfig, train_fraction: float = 0.8, split_seed: int | None = None):
    """Generate a dataset and attach a stratified split (seeded like the data by default)."""
    data = generate(config)
    seed = config.seed if split_seed is None else split_seed
    manifest = split_dataset(data.manifest, train_fraction, seed)
    return replace(data, manifest=manifest)


# --------------------------------------------------------------------------
# evaluation primitives


def center_label(names: Sequence[str], centers: Iterable[int]) -> str:
    return "+".join(names[h] for h in sorted(centers))


def _normalized(table: EmbeddingTable) -> EmbeddingTable:
    return table.with_z(l2_normalize(table.z))


def fit_raw(train_table: EmbeddingTable, n_classes: int):
    """No adaptation: prototypes of normalized BGAP embeddings."""
    bank = build_prototypes(l2_normalize(train_table.z), train_table.labels, n_classes)
    return bank, _normalized


def fit_scda(train_table: EmbeddingTable, n_classes: int, config: TrainConfig,
             prototype_table: EmbeddingTable | None = None):
    report = train(train_table, config)
    head = report.final_head
    proto_src = train_table if prototype_table is None else prototype_table
    bank = build_prototypes(transform(head, proto_src).z, proto_src.labels, n_classes)
    return bank, (lambda t: transform(head, t))


def confusion(bank, mapper: Callable, test_table: EmbeddingTable) -> ConfusionMatrix:
    mapped = mapper(test_table)
    return evaluate(bank, mapped.z, mapped.labels)


@dataclass(frozen=True)
class ReportRow:
    method: str
    train_centers: str
    test_centers: str
    k: str
    seed: int
    bacc: float
    confusion: np.ndarray = field(default=None, compare=False, repr=False)


def _test_sets(n_centers: int) -> list[tuple[int, ...]]:
    sets = [(h,) for h in range(n_centers)]
    if n_centers > 1:
        sets.append(tuple(range(n_centers)))
    return sets


def score_rows(method, train_name, k, seed, bank, mapper, test: EmbeddingTable, names) -> list[ReportRow]:
    rows = []
    for centers in _test_sets(len(names)):
        cm = confusion(bank, mapper, test.in_centers(centers))
        rows.append(ReportRow(method, train_name, center_label(names, centers), k, seed,
                              balanced_accuracy(cm), cm.counts))
    return rows


def _map_cells(fn: Callable, cells: list, threads: int | None) -> list:
    if threads is None:
        threads = int(os.environ.get("SCDA_THREADS", "0") or 0)
    if threads <= 0 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, cells))


def cell_seed(seed: int, k: int, cell_id: int) -> int:
    """Independent seed for one harness cell, identical in serial and parallel runs."""
    return int(np.random.SeedSequence([seed, k, cell_id]).generate_state(1)[0])


def run_crosscenter_grid(
    manifest: DatasetManifest,
    table: EmbeddingTable,
    train_config: TrainConfig,
    methods: Sequence[str] = ("raw", "scda"),
    seeds: Sequence[int] = (0,),
    threads: int | None = None,
) -> list[ReportRow]:
    """Train on each center and on all centers; score every test set.

    ``scda`` trained on a single center has no cross-center pairs and
    reduces to plain supervised contrastive training on that center.
    """
    names = manifest.centers
    n_classes = len(manifest.classes)
    is_train = manifest.split_mask("train")
    train_all, test_all = table.subset(is_train), table.subset(~is_train)
    train_sets = _test_sets(len(names))

    cells = [(m, ti, seed) for seed in seeds for ti in range(len(train_sets)) for m in methods]

    def run(cell):
        method, ti, seed = cell
        centers = train_sets[ti]
        pool = train_all.in_centers(centers)
        if method == "raw":
            bank, mapper = fit_raw(pool, n_classes)
        elif method == "scda":
            cfg = replace(train_config, seed=cell_seed(seed, 0, ti))
            bank, mapper = fit_scda(pool, n_classes, cfg)
        else:
            raise ValueError(f"unknown method {method!r}")
        return score_rows(method, center_label(names, centers), "all", seed, bank, mapper, test_all, names)

    return [row for rows in _map_cells(run, cells, threads) for row in rows]


@dataclass(frozen=True)
class FewShotConfig:
    base_center: int = 0
    k_values: tuple[int, ...] = (2, 4, 6, 8, 10)
    n_seeds: int = 5
    include_zero_shot: bool = True
    include_all: bool = True
    shots_in_prototypes: bool = True
    first_seed: int = 0  # seeds run are first_seed .. first_seed + n_seeds - 1

    def __post_init__(self) -> None:
        if any(k < 1 for k in self.k_values):
            raise ValueError("k values must be positive")
        object.__setattr__(self, "k_values", tuple(int(k) for k in self.k_values))


def select_shots(train_table: EmbeddingTable, center: int, k: int, n_classes: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Indexes (into ``train_table``) of k uniformly chosen slides per class at ``center``."""
    picked = []
    for s in range(n_classes):
        cell = np.flatnonzero((train_table.centers == center) & (train_table.labels == s))
        if len(cell) < k:
            raise NotEnoughShots(f"class {s} at center {center} has {len(cell)} training slides, need {k}")
        picked.append(np.sort(rng.choice(cell, size=k, replace=False)))
    return np.concatenate(picked)


def run_fewshot(
    manifest: DatasetManifest,
    table: EmbeddingTable,
    fewshot: FewShotConfig,
    train_config: TrainConfig,
    threads: int | None = None,
) -> list[ReportRow]:
    """Few-shot curve: base center fully labeled plus k slides per class from the other."""
    names = manifest.centers
    n_classes = len(manifest.classes)
    if len(names) < 2:
        raise NotEnoughShots("few-shot evaluation needs a held-out center")
    base = fewshot.base_center
    held = [h for h in range(len(names)) if h != base]
    is_train = manifest.split_mask("train")
    train_all, test_all = table.subset(is_train), table.subset(~is_train)
    base_pool = train_all.in_centers([base])
    base_name = names[base]
    for h in held:
        for s in range(n_classes):
            n = int(np.sum((train_all.centers == h) & (train_all.labels == s)))
            if fewshot.k_values and n < max(fewshot.k_values):
                raise NotEnoughShots(f"class {s} at center {names[h]} has {n} training slides")

    cells: list[tuple[str, int, int]] = []
    for seed in range(fewshot.first_seed, fewshot.first_seed + fewshot.n_seeds):
        if fewshot.include_zero_shot:
            cells.append(("zero", 0, seed))
        cells.extend(("k", k, seed) for k in fewshot.k_values)
        if fewshot.include_all:
            cells.append(("all", -1, seed))

    def run(cell):
        kind, k, seed = cell
        if kind == "zero":
            bank, mapper = fit_raw(base_pool, n_classes)
            return score_rows("raw", base_name, "0", seed, bank, mapper, test_all, names)
        if kind == "all":
            cfg = replace(train_config, seed=cell_seed(seed, 0, 1))
            rows = []
            bank, mapper = fit_raw(train_all, n_classes)
            rows += score_rows("raw", center_label(names, range(len(names))), "all", seed, bank, mapper,
                                test_all, names)
            bank, mapper = fit_scda(train_all, n_classes, cfg)
            rows += score_rows("scda", center_label(names, range(len(names))), "all", seed, bank, mapper,
                                test_all, names)
            return rows
        rng = np.random.default_rng(cell_seed(seed, k, 2))
        shots = np.concatenate([select_shots(train_all, h, k, n_classes, rng) for h in held])
        pool = _concat(base_pool, train_all.subset(shots))
        cfg = replace(train_config, seed=cell_seed(seed, k, 3))
        proto = pool if fewshot.shots_in_prototypes else base_pool
        bank, mapper = fit_scda(pool, n_classes, cfg, prototype_table=proto)
        train_name = f"{base_name}+{k}-shot"
        return score_rows("scda", train_name, str(k), seed, bank, mapper, test_all, names)

    return [row for rows in _map_cells(run, cells, threads) for row in rows]


def _concat(a: EmbeddingTable, b: EmbeddingTable) -> EmbeddingTable:
    return replace(
        a,
        ids=a.ids + b.ids,
        labels=np.concatenate([a.labels, b.labels]),
        centers=np.concatenate([a.centers, b.centers]),
        z=np.vstack([a.z, b.z]),
    )


# --------------------------------------------------------------------------
# reports


def aggregate_rows(rows: Sequence[ReportRow]) -> list[tuple]:
    """Mean and sample standard deviation over seeds, in first-seen order."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r.method, r.train_centers, r.test_centers, r.k), []).append(r.bacc)
    out = []
    for key, values in groups.items():
        arr = np.array(values)
        std = float(np.std(arr, ddof=1)) if len(arr) > 1 else 0.0
        out.append((*key, len(arr), float(np.mean(arr)), std))
    return out


def rows_to_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in rows:
        writer.writerow([r.method, r.train_centers, r.test_centers, r.k, r.seed, repr(r.bacc)])
    return buf.getvalue()


def aggregate_to_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(AGGREGATE_COLUMNS)
    for method, train_c, test_c, k, n, mean, std in aggregate_rows(rows):
        writer.writerow([method, train_c, test_c, k, n, repr(mean), repr(std)])
    return buf.getvalue()


def confusion_to_csv(counts: np.ndarray, class_names: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["true\\pred", *class_names])
    for name, row in zip(class_names, np.asarray(counts)):
        writer.writerow([name, *map(int, row)])
    return buf.getvalue()
