"""Command-line entry point.

Every command writes into the run directory given by ``--out``, together
with ``config.toml``, the effective configuration of the run. Failures print
one ``error: <Code>: <message>`` line on stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable

import numpy as np

from .adapter import load_head, save_head, train, transform
from .config import RunConfig, load_config
from .embedding import (
    EmbeddingTable,
    aggregate,
    load_bags,
    load_embeddings,
    read_manifest,
    save_embeddings,
    split_dataset,
    write_manifest,
    write_matrix,
)
from .errors import ConfigError, ManifestError, ScdaError
from .projection import pca2d, projection_svg
from .prototypes import build_prototypes
from .stain import StainProfile, estimate_stain_profile, normalize_to_target, read_ppm, write_ppm
from .synth import (
    ReportRow,
    aggregate_to_csv,
    center_label,
    confusion_to_csv,
    fit_raw,
    generate,
    rows_to_csv,
    run_crosscenter_grid,
    run_fewshot,
    score_rows,
)

BAGS_MANIFEST = "bags.json"
EMBEDDINGS = "embeddings.json"


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _load_table(path: str | Path):
    manifest, z = load_embeddings(path)
    return manifest, EmbeddingTable.from_manifest(manifest, z)


def _require_splits(manifest, path) -> None:
    if manifest.splits is None:
        raise ManifestError(f"{path}: dataset has no train/test split (run `scda split` first)")


def _write_report(out: Path, rows: list[ReportRow], class_names) -> None:
    _write(out / "report.csv", rows_to_csv(rows))
    _write(out / "aggregate.csv", aggregate_to_csv(rows))
    summed: dict[tuple, np.ndarray] = {}
    for r in rows:
        key = (r.method, r.train_centers, r.test_centers, r.k)
        summed[key] = summed.get(key, 0) + r.confusion
    for (method, train_c, test_c, k), counts in summed.items():
        name = f"confusion_{method}_{train_c}_{test_c}_k{k}.csv".replace("+", "-")
        _write(out / name, confusion_to_csv(counts, class_names))


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, config: RunConfig, out: Path) -> None:
    data = generate(config.synth())
    (out / "bags").mkdir(exist_ok=True)
    for bag, rec in zip(data.bags, data.manifest.slides):
        write_matrix(out / rec.bag, bag.patches)
    write_manifest(out / BAGS_MANIFEST, data.manifest)
    manifest = split_dataset(data.manifest, config.train_fraction, config.seed)
    save_embeddings(manifest, data.table.z, out / EMBEDDINGS)


def cmd_aggregate(args, config: RunConfig, out: Path) -> None:
    manifest = read_manifest(args.input)
    z = aggregate(load_bags(args.input))
    save_embeddings(manifest, z, out / EMBEDDINGS)


def cmd_split(args, config: RunConfig, out: Path) -> None:
    manifest, z = load_embeddings(args.input)
    manifest = split_dataset(manifest, config.train_fraction, config.seed)
    save_embeddings(manifest, z, out / EMBEDDINGS)


def _train_pool(manifest, table, centers_arg):
    pool = table.subset(manifest.split_mask("train")) if manifest.splits is not None else table
    if centers_arg:
        wanted = centers_arg.split(",")
        missing = [c for c in wanted if c not in manifest.centers]
        if missing:
            raise ConfigError(f"--centers: unknown center(s) {missing}")
        pool = pool.in_centers([manifest.centers.index(c) for c in wanted])
    return pool


def cmd_train(args, config: RunConfig, out: Path) -> None:
    manifest, table = _load_table(args.input)
    pool = _train_pool(manifest, table, args.centers)
    report = train(pool, config.train(manifest.classes, manifest.centers))
    save_head(report.final_head, out / "head.scdh")
    rows = [
        (step, repr(float(a)), repr(float(b)), int(n))
        for step, (a, b, n) in enumerate(
            zip(report.loss_trace, report.scaled_loss_trace, report.anchors_used_trace)
        )
    ]
    _write(out / "loss_trace.csv", _csv(("step", "loss", "mean_loss", "anchors_used"), rows))


def cmd_transform(args, config: RunConfig, out: Path) -> None:
    manifest, table = _load_table(args.input)
    mapped = transform(load_head(args.head), table)
    save_embeddings(replace(manifest, embeddings=None), mapped.z.astype(np.float32), out / EMBEDDINGS)


def cmd_eval(args, config: RunConfig, out: Path) -> None:
    manifest, table = _load_table(args.input)
    _require_splits(manifest, args.input)
    is_train = manifest.split_mask("train")
    train_t, test_t = table.subset(is_train), table.subset(~is_train)
    n_classes = len(manifest.classes)
    if args.head:
        head = load_head(args.head)
        method = "scda"

        def mapper(t):
            return transform(head, t)

        bank = build_prototypes(mapper(train_t).z, train_t.labels, n_classes)
    else:
        method = "raw"
        bank, mapper = fit_raw(train_t, n_classes)
    train_name = center_label(manifest.centers, np.unique(train_t.centers))
    rows = score_rows(method, train_name, "all", config.seed, bank, mapper, test_t, manifest.centers)
    _write_report(out, rows, manifest.classes)


def cmd_grid(args, config: RunConfig, out: Path) -> None:
    manifest, table = _load_table(args.input)
    _require_splits(manifest, args.input)
    rows = run_crosscenter_grid(
        manifest,
        table,
        config.train(manifest.classes, manifest.centers),
        methods=config.grid_methods,
        seeds=config.grid_seeds,
    )
    _write_report(out, rows, manifest.classes)


def cmd_fewshot(args, config: RunConfig, out: Path) -> None:
    manifest, table = _load_table(args.input)
    _require_splits(manifest, args.input)
    rows = run_fewshot(
        manifest,
        table,
        config.fewshot(manifest.centers),
        config.train(manifest.classes, manifest.centers),
    )
    _write_report(out, rows, manifest.classes)


def _profile(path: str, params) -> StainProfile:
    if path.endswith(".json"):
        return StainProfile.from_json(Path(path).read_text(encoding="utf-8"))
    return estimate_stain_profile(read_ppm(path), params)


def cmd_stain_fit(args, config: RunConfig, out: Path) -> None:
    profile = estimate_stain_profile(read_ppm(args.input), config.stain())
    _write(out / "profile.json", profile.to_json() + "\n")


def cmd_stain_normalize(args, config: RunConfig, out: Path) -> None:
    if not args.target:
        raise ConfigError("--target: stain-normalize needs a target image or profile")
    params = config.stain()
    image = read_ppm(args.input)
    source = estimate_stain_profile(image, params)
    target = _profile(args.target, params)
    write_ppm(out / "normalized.ppm", normalize_to_target(image, source, target, params))
    _write(out / "source_profile.json", source.to_json() + "\n")
    _write(out / "target_profile.json", target.to_json() + "\n")


def cmd_project2d(args, config: RunConfig, out: Path) -> None:
    manifest, table = _load_table(args.input)
    if args.head:
        table = transform(load_head(args.head), table)
    proj = pca2d(table.z)
    rows = [
        (rec.id, rec.center, rec.label, repr(float(x)), repr(float(y)))
        for rec, (x, y) in zip(manifest.slides, proj.coords)
    ]
    _write(out / "projection.csv", _csv(("slide_id", "center", "class", "x", "y"), rows))
    if args.svg:
        svg = projection_svg(proj.coords, table.labels, table.centers, manifest.classes, manifest.centers)
        _write(out / "projection.svg", svg)


COMMANDS: dict[str, tuple[Callable, str]] = {
    "synth": (cmd_synth, "generate a synthetic two-center dataset (bags, embeddings, split)"),
    "split": (cmd_split, "attach a stratified train/test split to an embeddings manifest"),
    "aggregate": (cmd_aggregate, "average-pool patch bags into slide embeddings"),
    "train": (cmd_train, "train an adaptation head on the training split"),
    "transform": (cmd_transform, "map embeddings through a trained head"),
    "eval": (cmd_eval, "prototype classification of the test split"),
    "grid": (cmd_grid, "cross-center train/test grid for raw and adapted embeddings"),
    "fewshot": (cmd_fewshot, "few-shot curve on a held-out center"),
    "stain-fit": (cmd_stain_fit, "estimate a stain profile from a PPM image"),
    "stain-normalize": (cmd_stain_normalize, "re-render a PPM image with a target stain profile"),
    "project2d": (cmd_project2d, "2-D PCA projection of slide embeddings"),
}

NEEDS_INPUT = set(COMMANDS) - {"synth"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scda", description="Cross-center slide embedding adaptation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="TOML file overriding the packaged defaults")
        p.add_argument("--seed", type=int, help="global seed")
        p.add_argument("--out", required=True, help="run directory (created if missing)")
        if name in NEEDS_INPUT:
            p.add_argument("--input", required=True, help="input manifest or PPM image")
        if name in ("train", "transform", "eval", "grid", "fewshot"):
            p.add_argument("--lr", type=float, help="learning rate")
            p.add_argument("--steps", type=int, help="optimizer steps")
            p.add_argument("--tau", type=float, help="loss temperature")
        if name in ("transform", "eval", "project2d"):
            p.add_argument("--head", required=name == "transform", help="trained head (.scdh)")
        if name == "train":
            p.add_argument("--centers", help="comma-separated training centers (default: all)")
        if name == "fewshot":
            p.add_argument("--k", help="comma-separated shots per class, e.g. 2,10")
        if name == "stain-normalize":
            p.add_argument("--target", help="target PPM image or profile JSON")
        if name == "project2d":
            p.add_argument("--svg", action="store_true", help="also write projection.svg")
    return parser


def _overrides(args) -> dict:
    out = {}
    if args.seed is not None:
        out["seed"] = args.seed
    for flag, key in (("lr", "train.learning_rate"), ("steps", "train.steps"), ("tau", "train.temperature")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    if getattr(args, "k", None):
        try:
            out["fewshot.k_values"] = [int(v) for v in args.k.split(",")]
        except ValueError:
            raise ConfigError(f"--k: expected comma-separated integers, got {args.k!r}") from None
    return out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, _overrides(args))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        config.dump(out / "config.toml")
        COMMANDS[args.command][0](args, config, out)
    except ScdaError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        where = exc.filename if exc.filename is not None else ""
        print(f"error: IOError: {where}: {exc.strerror or exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
