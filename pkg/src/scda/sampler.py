"""Cross-domain batch construction.

Every batch draws a fixed quota from each (class, center) cell of the
training pool, so each class is present from every center in every batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptyCell, InfeasibleSpec

Cell = tuple[int, int]


@dataclass(frozen=True)
class BatchSpec:
    """Per-cell quotas. ``quota`` overrides ``default_quota`` for listed cells."""

    default_quota: int = 1
    quota: Mapping[Cell, int] = field(default_factory=dict)
    steps_per_epoch: int = 100
    allow_replacement: bool = True

    def __post_init__(self) -> None:
        if self.default_quota < 1 or any(q < 1 for q in self.quota.values()):
            raise InfeasibleSpec("every cell quota must be >= 1")
        if self.steps_per_epoch < 1:
            raise InfeasibleSpec("steps_per_epoch must be >= 1")

    def quota_for(self, cell: Cell) -> int:
        return int(self.quota.get(cell, self.default_quota))


@dataclass(frozen=True)
class CellReport:
    cell: Cell
    count: int
    quota: int


@dataclass(frozen=True)
class FeasibilityReport:
    cells: tuple[CellReport, ...]

    @property
    def feasible_without_replacement(self) -> bool:
        return all(c.count >= c.quota for c in self.cells)

    @property
    def feasible_with_replacement(self) -> bool:
        return all(c.count >= 1 for c in self.cells)

    def feasible(self, allow_replacement: bool) -> bool:
        return self.feasible_with_replacement if allow_replacement else self.feasible_without_replacement

    @property
    def batch_size(self) -> int:
        return sum(c.quota for c in self.cells)


@dataclass(frozen=True)
class BatchPlan:
    batches: tuple[np.ndarray, ...]
    seed: int

    def __len__(self) -> int:
        return len(self.batches)


def _cells(labels: np.ndarray, centers: np.ndarray, classes, center_ids) -> list[Cell]:
    classes = sorted(set(labels.tolist())) if classes is None else list(classes)
    center_ids = sorted(set(centers.tolist())) if center_ids is None else list(center_ids)
    return [(c, h) for c in classes for h in center_ids]


def check_feasibility(
    labels: Sequence[int],
    centers: Sequence[int],
    spec: BatchSpec,
    classes: Sequence[int] | None = None,
    center_ids: Sequence[int] | None = None,
) -> FeasibilityReport:
    """Compare each cell's pool count with its quota.

    The cell grid is ``classes x center_ids``, defaulting to the values that
    occur in the pool. Raises EmptyCell when some cell has no samples at all.
    """
    labels = np.asarray(labels)
    centers = np.asarray(centers)
    if labels.size == 0:
        raise EmptyCell("training pool is empty")
    reports = []
    for cell in _cells(labels, centers, classes, center_ids):
        count = int(np.sum((labels == cell[0]) & (centers == cell[1])))
        if count == 0:
            raise EmptyCell(f"cell (class={cell[0]}, center={cell[1]}) has no samples")
        reports.append(CellReport(cell, count, spec.quota_for(cell)))
    return FeasibilityReport(tuple(reports))


def make_batches(
    labels: Sequence[int],
    centers: Sequence[int],
    spec: BatchSpec,
    seed: int | np.random.Generator,
    steps: int | None = None,
    classes: Sequence[int] | None = None,
    center_ids: Sequence[int] | None = None,
) -> BatchPlan:
    """Draw ``steps`` (default ``spec.steps_per_epoch``) constrained batches.

    Within a batch a cell is sampled without repetition when it holds at
    least its quota, otherwise with replacement (when allow_replacement is set).
    """
    labels = np.asarray(labels)
    centers = np.asarray(centers)
    report = check_feasibility(labels, centers, spec, classes, center_ids)
    if not report.feasible(spec.allow_replacement):
        short = [c.cell for c in report.cells if c.count < c.quota]
        raise InfeasibleSpec(f"cells below quota without replacement: {short}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    members = [np.flatnonzero((labels == c.cell[0]) & (centers == c.cell[1])) for c in report.cells]
    n = spec.steps_per_epoch if steps is None else steps
    batches = []
    for _ in range(n):
        parts = []
        for rep, idx in zip(report.cells, members):
            replace = rep.count < rep.quota
            parts.append(idx[rng.choice(rep.count, size=rep.quota, replace=replace)])
        batches.append(np.concatenate(parts))
    plan_seed = seed if isinstance(seed, int) else -1
    return BatchPlan(tuple(batches), plan_seed)
