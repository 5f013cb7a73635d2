"""Deterministic 2-D PCA projection for embedding-space plots."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RankDeficient, ShapeMismatch

EIGEN_TOLERANCE = 1e-12


@dataclass(frozen=True)
class Projection2D:
    basis: np.ndarray  # (2, d), orthonormal rows
    coords: np.ndarray  # (B, 2)
    explained_variance_fraction: float
    mean: np.ndarray


def pca2d(embeddings: np.ndarray) -> Projection2D:
    """Top-2 principal directions of the sample covariance.

    Each basis row is signed so that its largest-magnitude entry is positive.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3 or x.shape[1] < 2:
        raise ShapeMismatch(f"need at least 3 rows and 2 columns, got shape {x.shape}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    if vals[1] < EIGEN_TOLERANCE:
        raise RankDeficient("covariance has fewer than two non-zero eigenvalues")
    basis = vecs[:, :2].T.copy()
    for row in basis:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    total = float(np.sum(np.clip(vals, 0, None)))
    return Projection2D(basis, centered @ basis.T, float((vals[0] + vals[1]) / total), mean)


def projection_svg(coords: np.ndarray, labels, centers, class_names, center_names, size: int = 480) -> str:
    """Scatter plot: color by class, marker shape by center."""
    palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
               "#bcbd22", "#17becf"]
    coords = np.asarray(coords, dtype=np.float64)
    pad = 40
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    xy = pad + (coords - lo) / span * (size - 2 * pad)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 140}" height="{size}" '
        f'viewBox="0 0 {size + 140} {size}">',
        f'<rect width="{size + 140}" height="{size}" fill="white"/>',
    ]

    def marker(x, y, shape, color):
        if shape == 0:
            return f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="{color}" fill-opacity="0.8"/>'
        if shape == 1:
            return (f'<polygon points="{x:.2f},{y - 5:.2f} {x - 5:.2f},{y + 4:.2f} {x + 5:.2f},{y + 4:.2f}" '
                    f'fill="{color}" fill-opacity="0.8"/>')
        return f'<rect x="{x - 4:.2f}" y="{y - 4:.2f}" width="8" height="8" fill="{color}" fill-opacity="0.8"/>'

    for (x, y), c, h in zip(xy, labels, centers):
        parts.append(marker(x, size - y, int(h) % 3, palette[int(c) % len(palette)]))
    for i, name in enumerate(class_names):
        parts.append(marker(size + 20, 20 + 18 * i, 0, palette[i % len(palette)]))
        parts.append(f'<text x="{size + 32}" y="{24 + 18 * i}" font-size="12">{name}</text>')
    offset = 30 + 18 * len(class_names)
    for i, name in enumerate(center_names):
        parts.append(marker(size + 20, offset + 18 * i, i % 3, "#333333"))
        parts.append(f'<text x="{size + 32}" y="{offset + 4 + 18 * i}" font-size="12">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
