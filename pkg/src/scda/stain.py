"""Macenko H&E stain estimation and normalization.

Images are H x W x 3 uint8 arrays. Optical density uses base-10 logarithms:
``od = -log10(max(pixel, 1) / io)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagic, DegenerateStains, NotEnoughTissue, TruncatedFile

MIN_TISSUE_PIXELS = 100
MIN_STAIN_ANGLE_DEG = 1.0


@dataclass(frozen=True)
class MacenkoParams:
    io_reference: float = 255.0
    beta: float = 0.15
    alpha: float = 1.0
    concentration_percentile: float = 99.0

    def __post_init__(self) -> None:
        if not 0 < self.alpha < 50:
            raise ValueError("alpha must lie in (0, 50)")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.io_reference > 0:
            raise ValueError("io_reference must be positive")


@dataclass(frozen=True)
class StainProfile:
    stain_matrix: np.ndarray  # 3 x 2, unit columns (H, E)
    max_concentrations: np.ndarray  # (2,)

    def __post_init__(self) -> None:
        m = np.asarray(self.stain_matrix, dtype=np.float64)
        if m.shape != (3, 2):
            raise ValueError(f"stain matrix must be 3x2, got {m.shape}")
        if np.any(np.abs(np.linalg.norm(m, axis=0) - 1.0) > 1e-9):
            raise ValueError("stain columns must have unit norm")
        if np.any(m < -1e-6):
            raise DegenerateStains("stain vectors have negative optical density entries")
        if _angle_deg(m[:, 0], m[:, 1]) < MIN_STAIN_ANGLE_DEG:
            raise DegenerateStains("stain vectors are within 1 degree of each other")
        object.__setattr__(self, "stain_matrix", m)
        object.__setattr__(self, "max_concentrations", np.asarray(self.max_concentrations, dtype=np.float64))

    def to_json(self) -> str:
        doc = {
            "stain_matrix": self.stain_matrix.tolist(),
            "max_concentrations": self.max_concentrations.tolist(),
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "StainProfile":
        doc = json.loads(text)
        return cls(np.array(doc["stain_matrix"]), np.array(doc["max_concentrations"]))


def rgb_to_od(image: np.ndarray, io_reference: float = 255.0) -> np.ndarray:
    pixels = np.maximum(np.asarray(image, dtype=np.float64), 1.0)
    return -np.log10(pixels / io_reference)


def od_to_rgb(od: np.ndarray, io_reference: float = 255.0) -> np.ndarray:
    rgb = io_reference * np.power(10.0, -np.asarray(od, dtype=np.float64))
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def _angle_deg(u: np.ndarray, v: np.ndarray) -> float:
    cos = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def concentrations(od: np.ndarray, stain_matrix: np.ndarray) -> np.ndarray:
    """Per-pixel least-squares stain amounts (N x 2), negatives clamped to 0.

    ``od`` is N x 3. Solved through the 2x2 Gram matrix of the stain columns.
    """
    m = np.asarray(stain_matrix, dtype=np.float64)
    gram = m.T @ m
    c = od @ m @ np.linalg.inv(gram).T
    return np.maximum(c, 0.0)


def estimate_from_od(od: np.ndarray, params: MacenkoParams = MacenkoParams()) -> StainProfile:
    """Stain profile from optical densities (N x 3) of every pixel."""
    od = np.asarray(od, dtype=np.float64).reshape(-1, 3)
    tissue = od[np.all(od > params.beta, axis=1)]
    if len(tissue) < MIN_TISSUE_PIXELS:
        raise NotEnoughTissue(f"only {len(tissue)} tissue pixels (need {MIN_TISSUE_PIXELS})")

    _, vecs = np.linalg.eigh(np.cov(tissue.T))
    plane = vecs[:, [2, 1]]  # two largest eigenvalues, largest first
    proj = tissue @ plane
    plane = plane * np.where(proj.sum(axis=0) < 0, -1.0, 1.0)
    proj = tissue @ plane

    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo = np.percentile(phi, params.alpha)
    hi = np.percentile(phi, 100 - params.alpha)
    v_lo = plane @ np.array([np.cos(lo), np.sin(lo)])
    v_hi = plane @ np.array([np.cos(hi), np.sin(hi)])
    v_lo /= np.linalg.norm(v_lo)
    v_hi /= np.linalg.norm(v_hi)
    if _angle_deg(v_lo, v_hi) < MIN_STAIN_ANGLE_DEG:
        raise DegenerateStains("extreme stain directions are within 1 degree of each other")

    # hematoxylin absorbs more red than eosin
    h, e = (v_lo, v_hi) if v_lo[0] > v_hi[0] else (v_hi, v_lo)
    stains = np.column_stack([h, e])
    conc = concentrations(od, stains)
    max_c = np.percentile(conc, params.concentration_percentile, axis=0)
    return StainProfile(stains, max_c)


def estimate_stain_profile(image: np.ndarray, params: MacenkoParams = MacenkoParams()) -> StainProfile:
    """Fit the two stain vectors and their robust maximum concentrations."""
    return estimate_from_od(rgb_to_od(image, params.io_reference), params)


def normalize_to_target(
    image: np.ndarray,
    source: StainProfile,
    target: StainProfile,
    params: MacenkoParams = MacenkoParams(),
) -> np.ndarray:
    """Re-render ``image`` with the target's stain colors and intensity scale."""
    image = np.asarray(image)
    od = rgb_to_od(image, params.io_reference).reshape(-1, 3)
    conc = concentrations(od, source.stain_matrix)
    conc = conc * (target.max_concentrations / source.max_concentrations)
    out = od_to_rgb(conc @ target.stain_matrix.T, params.io_reference)
    return out.reshape(image.shape)


def synthesize_stain_image(profile: StainProfile, fields: np.ndarray, io_reference: float = 255.0) -> np.ndarray:
    """Forward Beer-Lambert rendering of two concentration fields (2 x H x W)."""
    fields = np.asarray(fields, dtype=np.float64)
    if fields.ndim != 3 or fields.shape[0] != 2:
        raise ValueError(f"expected concentration fields of shape (2, H, W), got {fields.shape}")
    od = np.einsum("cs,shw->hwc", profile.stain_matrix, fields)
    return od_to_rgb(od, io_reference)


def read_ppm(path: str | Path) -> np.ndarray:
    """Binary P6 PPM with maxval 255."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedFile(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P6" or not all(t.isdigit() for t in tokens[1:]) or int(tokens[3]) != 255:
        raise BadMagic(f"{path}: only P6 PPM with maxval 255 is supported")
    width, height = int(tokens[1]), int(tokens[2])
    body = data[pos : pos + width * height * 3]
    if len(body) != width * height * 3:
        raise TruncatedFile(f"{path}: truncated PPM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + image.tobytes())
