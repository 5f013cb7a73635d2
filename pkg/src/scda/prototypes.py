"""Nearest-prototype classification and balanced accuracy."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .embedding import l2_normalize
from .errors import DimensionMismatch, EmptyMatrix, MissingClass, ZeroVector


class AbsentClassWarning(UserWarning):
    """A class has no test slides and was left out of the balanced accuracy."""


@dataclass(frozen=True)
class PrototypeBank:
    weights: np.ndarray  # (n_classes, d), unit rows
    class_names: tuple[str, ...] = ()

    @property
    def n_classes(self) -> int:
        return int(self.weights.shape[0])


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def build_prototypes(
    embeddings: np.ndarray, labels: Sequence[int], n_classes: int | None = None, class_names=()
) -> PrototypeBank:
    """Normalized class means of unit-norm embeddings."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    rows = []
    for s in range(n_classes):
        members = embeddings[labels == s]
        if len(members) == 0:
            raise MissingClass(f"class {s} has no training samples")
        try:
            rows.append(l2_normalize(members.mean(axis=0)))
        except ZeroVector:
            raise ZeroVector(f"class {s} mean has zero norm") from None
    return PrototypeBank(np.vstack(rows), tuple(class_names))


def scores(bank: PrototypeBank, c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if c.shape[-1] != bank.weights.shape[1]:
        raise DimensionMismatch(f"embedding dimension {c.shape[-1]} != prototype dimension {bank.weights.shape[1]}")
    return c @ bank.weights.T


def predict(bank: PrototypeBank, c: np.ndarray) -> np.ndarray | int:
    """Index of the most similar prototype; ties go to the lowest index.

    Accepts one vector or a matrix of row vectors.
    """
    s = scores(bank, c)
    pred = np.argmax(s, axis=-1)  # argmax returns the first maximum
    return int(pred) if np.ndim(pred) == 0 else pred


def evaluate(bank: PrototypeBank, embeddings: np.ndarray, labels: Sequence[int]) -> ConfusionMatrix:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptyMatrix("test set is empty")
    pred = np.atleast_1d(predict(bank, np.atleast_2d(embeddings)))
    counts = np.zeros((bank.n_classes, bank.n_classes), dtype=np.int64)
    np.add.at(counts, (labels, pred), 1)
    return ConfusionMatrix(counts)


def balanced_accuracy(cm: ConfusionMatrix | np.ndarray) -> float:
    """Mean per-class recall over classes that occur in the test set."""
    counts = np.asarray(cm.counts if isinstance(cm, ConfusionMatrix) else cm)
    support = counts.sum(axis=1)
    present = support > 0
    if not present.any():
        raise EmptyMatrix("confusion matrix has no observations")
    if not present.all():
        warnings.warn(
            f"classes {np.flatnonzero(~present).tolist()} absent from test set; excluded from balanced accuracy",
            AbsentClassWarning,
            stacklevel=2,
        )
    recalls = np.diag(counts)[present] / support[present]
    return float(np.mean(recalls))
