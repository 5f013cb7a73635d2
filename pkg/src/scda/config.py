"""Run configuration: packaged TOML defaults, a user file and flag overrides.

The effective document is what gets dumped to a run directory, and loading
that dump reproduces the same run.
"""

from __future__ import annotations

import copy
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .adapter import TrainConfig
from .errors import ConfigError, ScdaError
from .sampler import BatchSpec
from .stain import MacenkoParams
from .synth import FewShotConfig, SynthConfig

# keys whose value is a free-form table rather than a fixed set of fields
_OPEN_TABLES = {("batch", "quota")}


def default_document() -> dict:
    text = resources.files("scda").joinpath("defaults.toml").read_text(encoding="utf-8")
    return tomllib.loads(text)


def _same_kind(default: Any, value: Any) -> bool:
    if isinstance(default, bool) or isinstance(value, bool):
        return isinstance(default, bool) and isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float))
    return isinstance(value, type(default))


def _merge(base: dict, update: Mapping, where: str = "") -> None:
    for key, value in update.items():
        name = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"{name}: unknown key")
        default = base[key]
        if isinstance(default, dict) and (where.rstrip("."), key) not in _OPEN_TABLES:
            if not isinstance(value, Mapping):
                raise ConfigError(f"{name}: expected a table")
            _merge(default, value, f"{name}.")
            continue
        if not _same_kind(default, value):
            raise ConfigError(f"{name}: expected {type(default).__name__}, got {type(value).__name__}")
        base[key] = copy.deepcopy(value)


def _nest(dotted: Mapping[str, Any]) -> dict:
    out: dict = {}
    for key, value in dotted.items():
        *path, leaf = key.split(".")
        node = out
        for part in path:
            node = node.setdefault(part, {})
        node[leaf] = value
    return out


@dataclass(frozen=True)
class RunConfig:
    doc: dict

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    @property
    def train_fraction(self) -> float:
        return float(self.doc["split"]["train_fraction"])

    @property
    def grid_methods(self) -> tuple[str, ...]:
        return tuple(self.doc["grid"]["methods"])

    @property
    def grid_seeds(self) -> tuple[int, ...]:
        return tuple(range(self.seed, self.seed + int(self.doc["grid"]["n_seeds"])))

    def synth(self) -> SynthConfig:
        s = self.doc["synth"]
        return SynthConfig(
            dim=s["dim"],
            n_classes=s["n_classes"],
            n_centers=s["n_centers"],
            slides_per_cell=tuple(tuple(row) for row in s["slides_per_cell"]),
            patches_per_slide=tuple(s["patches_per_slide"]),
            class_separation=float(s["class_separation"]),
            center_shift=float(s["center_shift"]),
            center_translation=float(s["center_translation"]),
            slide_jitter=float(s["slide_jitter"]),
            patch_noise_sigma=float(s["patch_noise_sigma"]),
            seed=self.seed,
        )

    def batch_spec(self, classes: Sequence[str] | None = None, centers: Sequence[str] | None = None) -> BatchSpec:
        """Per-cell quota overrides are resolved only once class and center names are known."""
        b = self.doc["batch"]
        quota = {}
        for key, n in (b["quota"].items() if classes is not None and centers is not None else ()):
            cls, _, center = key.partition("/")
            if cls not in classes or center not in centers:
                raise ConfigError(f"batch.quota.{key}: no such class/center cell")
            quota[(list(classes).index(cls), list(centers).index(center))] = int(n)
        return BatchSpec(b["default_quota"], quota, b["steps_per_epoch"], b["allow_replacement"])

    def train(self, classes: Sequence[str] | None = None, centers: Sequence[str] | None = None) -> TrainConfig:
        t = self.doc["train"]
        return TrainConfig(
            temperature=float(t["temperature"]),
            learning_rate=float(t["learning_rate"]),
            steps=t["steps"],
            batch_spec=self.batch_spec(classes, centers),
            seed=self.seed,
            beta1=float(t["beta1"]),
            beta2=float(t["beta2"]),
            eps=float(t["eps"]),
            hidden=t["hidden"] or None,
            d_out=t["d_out"] or None,
        )

    def fewshot(self, centers: Sequence[str] = ("H1",)) -> FewShotConfig:
        f = self.doc["fewshot"]
        if f["base_center"] not in centers:
            raise ConfigError(f"fewshot.base_center: {f['base_center']!r} is not one of {list(centers)}")
        return FewShotConfig(
            base_center=list(centers).index(f["base_center"]),
            k_values=tuple(f["k_values"]),
            n_seeds=f["n_seeds"],
            include_zero_shot=f["include_zero_shot"],
            include_all=f["include_all"],
            shots_in_prototypes=f["shots_in_prototypes"],
            first_seed=self.seed,
        )

    def stain(self) -> MacenkoParams:
        return MacenkoParams(**{k: float(v) for k, v in self.doc["stain"].items()})

    def dumps(self) -> str:
        return tomli_w.dumps(self.doc)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then dotted-key ``overrides``."""
    doc = default_document()
    if path is not None:
        try:
            user = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        _merge(doc, user)
    _merge(doc, _nest(overrides or {}))
    config = RunConfig(doc)
    try:
        config.synth()
        config.train()
        config.stain()
        FewShotConfig(k_values=tuple(doc["fewshot"]["k_values"]))
    except ConfigError:
        raise
    except (ValueError, ScdaError) as exc:
        raise ConfigError(str(exc)) from None
    for key in doc["batch"]["quota"]:
        if "/" not in key:
            raise ConfigError(f"batch.quota.{key}: expected a 'class/center' key")
    if not 0 < doc["split"]["train_fraction"] < 1:
        raise ConfigError("split.train_fraction: must lie in (0, 1)")
    if doc["grid"]["n_seeds"] < 1 or doc["fewshot"]["n_seeds"] < 1:
        raise ConfigError("n_seeds must be >= 1")
    unknown = set(doc["grid"]["methods"]) - {"raw", "scda"}
    if unknown:
        raise ConfigError(f"grid.methods: unknown method(s) {sorted(unknown)}")
    return config
