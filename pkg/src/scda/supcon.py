"""Supervised contrastive loss for a single-view batch, with analytic gradient.

For anchor i with positives P(i) (same label, j != i) and contrast set
A(i) (every j != i)::

    L_i = -1/|P(i)| * sum_{p in P(i)} log( exp(s_ip / tau) / sum_{a in A(i)} exp(s_ia / tau) )

where s = reps @ reps.T. Anchors without positives contribute 0 and the
batch loss is the plain sum over anchors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveTemperature, ShapeMismatch, UnnormalizedInput

NORM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class LossResult:
    loss: float
    grad: np.ndarray
    anchors_used: int


def _check(reps: np.ndarray, temperature: float | None = None) -> np.ndarray:
    reps = np.asarray(reps, dtype=np.float64)
    if reps.ndim != 2:
        raise ShapeMismatch(f"representations must be a B x d matrix, got shape {reps.shape}")
    if temperature is not None and not temperature > 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {temperature}")
    norms = np.linalg.norm(reps, axis=1)
    if np.any(np.abs(norms - 1.0) > NORM_TOLERANCE):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise UnnormalizedInput(f"rows must be unit norm (max deviation {worst:.3g})")
    return reps


def pairwise_similarity(reps: np.ndarray) -> np.ndarray:
    """Dot-product matrix of unit-norm rows."""
    reps = _check(reps)
    return reps @ reps.T


def supcon_loss(reps: np.ndarray, labels, temperature: float) -> LossResult:
    """Loss value and d(loss)/d(reps) for one batch.

    The gradient treats ``reps`` as free variables; the Jacobian of the
    normalization that produced them belongs to the caller.
    """
    reps = _check(reps, temperature)
    labels = np.asarray(labels)
    b = reps.shape[0]
    if b < 2:
        raise ShapeMismatch("a contrastive batch needs at least two rows")
    if labels.shape != (b,):
        raise ShapeMismatch(f"expected {b} labels, got shape {labels.shape}")

    sim = np.clip(reps @ reps.T, -1.0, 1.0)
    logits = sim / temperature
    off_diag = ~np.eye(b, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & off_diag
    n_pos = pos.sum(axis=1)
    used = n_pos > 0

    masked = np.where(off_diag, logits, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    expd = np.exp(masked - row_max)
    denom = expd.sum(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(denom[:, 0])
    softmax = expd / denom

    safe_pos = np.maximum(n_pos, 1)
    pos_mean = np.where(pos, logits, 0.0).sum(axis=1) / safe_pos
    per_anchor = np.where(used, lse - pos_mean, 0.0)
    # fixed index-order reduction
    loss = 0.0
    for value in per_anchor:
        loss += float(value)

    coef = (softmax - pos / safe_pos[:, None]) / temperature
    coef[~used] = 0.0
    grad = (coef + coef.T) @ reps
    return LossResult(loss=max(loss, 0.0), grad=grad, anchors_used=int(used.sum()))

