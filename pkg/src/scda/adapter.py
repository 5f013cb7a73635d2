"""Learned projection head mapping slide embeddings into the shared space.

The head is either a single affine layer or affine -> ReLU -> affine, and its
output is always L2-normalized. Gradients are computed by hand and the
parameters are optimized with Adam over cross-domain batches.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding import EmbeddingTable
from .errors import (
    BadDimension,
    BadMagic,
    DivergenceDetected,
    ShapeMismatch,
    TruncatedFile,
    VersionMismatch,
    ZeroOutput,
)
from .sampler import BatchSpec, make_batches
from .supcon import supcon_loss

HEAD_MAGIC = b"SCDH"
HEAD_VERSION = 1


@dataclass(frozen=True)
class Linear:
    weight: np.ndarray  # (d_out, d_in)
    bias: np.ndarray  # (d_out,)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


@dataclass(frozen=True)
class AdapterHead:
    """One Linear layer, or two with a ReLU in between."""

    layers: tuple[Linear, ...]

    def __post_init__(self) -> None:
        if len(self.layers) not in (1, 2):
            raise BadDimension(f"a head has 1 or 2 layers, got {len(self.layers)}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[0] != b.weight.shape[1]:
                raise ShapeMismatch("consecutive layer shapes do not chain")
        if self.d_out < 2:
            raise BadDimension("output dimension must be >= 2")
        for layer in self.layers:
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise DivergenceDetected("head parameters are not finite")

    @property
    def d_in(self) -> int:
        return int(self.layers[0].weight.shape[1])

    @property
    def d_out(self) -> int:
        return int(self.layers[-1].weight.shape[0])

    @classmethod
    def identity(cls, d: int) -> "AdapterHead":
        return cls((Linear(np.eye(d), np.zeros(d)),))

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def with_parameters(self, params: list[np.ndarray]) -> "AdapterHead":
        layers = tuple(Linear(params[2 * i], params[2 * i + 1]) for i in range(len(self.layers)))
        return AdapterHead(layers)


@dataclass(frozen=True)
class TrainConfig:
    temperature: float = 0.1
    learning_rate: float = 1e-3
    steps: int = 1000
    batch_spec: BatchSpec = field(default_factory=BatchSpec)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden: int | None = None  # None: linear head, otherwise MLP hidden width
    d_out: int | None = None  # None: same as input

    def __post_init__(self) -> None:
        if not (self.temperature > 0 and self.learning_rate > 0 and self.eps > 0):
            raise ValueError("temperature, learning_rate and eps must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")


@dataclass(frozen=True)
class TrainReport:
    loss_trace: np.ndarray  # raw summed loss per step
    scaled_loss_trace: np.ndarray  # loss / anchors_used, the quantity optimized
    anchors_used_trace: np.ndarray
    final_head: AdapterHead


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def init_head(d_in: int, hidden: int | None = None, seed: int = 0, d_out: int | None = None) -> AdapterHead:
    """Glorot-uniform weights, zero biases."""
    d_out = d_in if d_out is None else d_out
    if d_in < 2 or d_out < 2 or (hidden is not None and hidden < 1):
        raise BadDimension(f"invalid head dimensions d_in={d_in} hidden={hidden} d_out={d_out}")
    rng = np.random.default_rng(seed)
    if hidden is None:
        return AdapterHead((Linear(_glorot(rng, d_out, d_in), np.zeros(d_out)),))
    return AdapterHead(
        (
            Linear(_glorot(rng, hidden, d_in), np.zeros(hidden)),
            Linear(_glorot(rng, d_out, hidden), np.zeros(d_out)),
        )
    )


def _forward(head: AdapterHead, z: np.ndarray):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != head.d_in:
        raise ShapeMismatch(f"input shape {z.shape} does not match head input dimension {head.d_in}")
    acts = [z]
    pre = []
    x = z
    for i, layer in enumerate(head.layers):
        u = x @ layer.weight.T + layer.bias
        pre.append(u)
        x = np.maximum(u, 0.0) if i < len(head.layers) - 1 else u
        acts.append(x)
    u = acts[-1]
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ZeroOutput("a row maps to the zero vector before normalization")
    return u / norms, norms, acts, pre


def forward(head: AdapterHead, z: np.ndarray) -> np.ndarray:
    """Transformed, unit-norm representations for every row of ``z``."""
    return _forward(head, z)[0]


def backward(head: AdapterHead, z: np.ndarray, upstream: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients given d(loss)/d(output); ordered like ``head.parameters()``."""
    c, norms, acts, pre = _forward(head, z)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != c.shape:
        raise ShapeMismatch(f"upstream gradient shape {upstream.shape} != output shape {c.shape}")
    # d(u/|u|)/du = (I - c c^T) / |u|
    delta = (upstream - c * np.sum(c * upstream, axis=1, keepdims=True)) / norms
    grads: list[np.ndarray] = []
    for i in range(len(head.layers) - 1, -1, -1):
        layer = head.layers[i]
        grads = [delta.T @ acts[i], delta.sum(axis=0)] + grads
        if i > 0:
            delta = (delta @ layer.weight) * (pre[i - 1] > 0)
    return grads


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = []
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            out.append(p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


def train(pool: EmbeddingTable, config: TrainConfig) -> TrainReport:
    """Fit a head on ``pool`` with the supervised contrastive loss.

    Each step draws one cross-domain batch; the gradient of the summed loss
    is divided by the number of anchors with a positive.
    """
    head = init_head(pool.dim, config.hidden, config.seed, config.d_out)
    losses = np.zeros(config.steps)
    scaled = np.zeros(config.steps)
    anchors = np.zeros(config.steps, dtype=np.int64)
    if config.steps == 0:
        return TrainReport(losses, scaled, anchors, head)

    plan = make_batches(
        pool.labels,
        pool.centers,
        config.batch_spec,
        np.random.default_rng([config.seed, 1]),
        steps=config.steps,
    )
    params = head.parameters()
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps)
    for step, idx in enumerate(plan.batches):
        zb = pool.z[idx]
        c = forward(head, zb)
        res = supcon_loss(c, pool.labels[idx], config.temperature)
        if not np.isfinite(res.loss) or not np.all(np.isfinite(res.grad)):
            raise DivergenceDetected(f"non-finite loss at step {step}")
        losses[step] = res.loss
        anchors[step] = res.anchors_used
        if res.anchors_used == 0:
            continue
        scaled[step] = res.loss / res.anchors_used
        grads = backward(head, zb, res.grad / res.anchors_used)
        params = opt.step(params, grads)
        try:
            head = head.with_parameters(params)
        except DivergenceDetected as exc:
            raise DivergenceDetected(f"parameters diverged at step {step}") from exc
    return TrainReport(losses, scaled, anchors, head)


def transform(head: AdapterHead, table: EmbeddingTable) -> EmbeddingTable:
    """Map every slide into the shared space; provenance is unchanged."""
    return table.with_z(forward(head, table.z))


# --------------------------------------------------------------------------
# SCDH head files: b"SCDH" | u32 version | u32 n_layers | per layer:
# u64 rows | u64 cols | rows*cols float32 weights | rows float32 biases


def save_head(head: AdapterHead, path: str | Path) -> None:
    chunks = [struct.pack("<4sII", HEAD_MAGIC, HEAD_VERSION, len(head.layers))]
    for layer in head.layers:
        rows, cols = layer.weight.shape
        chunks.append(struct.pack("<QQ", rows, cols))
        chunks.append(np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_head(path: str | Path) -> AdapterHead:
    raw = Path(path).read_bytes()
    if raw[:4] != HEAD_MAGIC:
        raise BadMagic(f"{path}: not an SCDH head file")
    if len(raw) < 12:
        raise TruncatedFile(f"{path}: header is truncated")
    _, version, n_layers = struct.unpack_from("<4sII", raw)
    if version != HEAD_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {HEAD_VERSION}")
    offset = 12
    layers = []
    for _ in range(n_layers):
        if len(raw) < offset + 16:
            raise TruncatedFile(f"{path}: layer header is truncated")
        rows, cols = struct.unpack_from("<QQ", raw, offset)
        offset += 16
        need = (rows * cols + rows) * 4
        if len(raw) < offset + need:
            raise TruncatedFile(f"{path}: layer body is truncated")
        w = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=offset).reshape(rows, cols)
        offset += rows * cols * 4
        b = np.frombuffer(raw, dtype="<f4", count=rows, offset=offset)
        offset += rows * 4
        layers.append(Linear(w.astype(np.float64), b.astype(np.float64)))
    return AdapterHead(tuple(layers))
