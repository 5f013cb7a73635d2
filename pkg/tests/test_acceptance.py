"""Acceptance gate: eight end-to-end checks at their stated tolerances.

Each check records one PASS/FAIL line; the lines are printed together in the
pytest terminal summary (see conftest.py).
"""

import contextlib
import time

import numpy as np
import pytest

from oracles import (
    angle_deg,
    bacc_by_hand,
    central_difference,
    cross_domain_violations,
    max_relative_error,
    random_unit_rows,
    supcon_naive,
)
from scda.adapter import TrainConfig, backward, forward, init_head
from scda.cli import main
from scda.prototypes import AbsentClassWarning, ConfusionMatrix, balanced_accuracy
from scda.sampler import BatchSpec, make_batches
from scda.stain import StainProfile, estimate_stain_profile, normalize_to_target, synthesize_stain_image
from scda.supcon import supcon_loss
from scda.synth import (
    FewShotConfig,
    SynthConfig,
    aggregate_rows,
    generate_split,
    run_crosscenter_grid,
    run_fewshot,
    select_shots,
)

RESULTS: list[str] = []


def record(number: int, name: str, ok: bool, detail: str, started: float) -> None:
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {name}: {detail} ({time.perf_counter() - started:.1f}s)"
    RESULTS.append(line)
    print(line)
    assert ok, line


def random_batch(rng, max_b=8, max_d=6):
    b = int(rng.integers(2, max_b + 1))
    d = int(rng.integers(2, max_d + 1))
    return random_unit_rows(rng, b, d), rng.integers(0, 3, size=b)


@pytest.fixture(scope="module")
def default_data():
    return generate_split(SynthConfig())


def test_1_loss_matches_naive_transcription():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(200):
        reps, labels = random_batch(rng)
        tau = float(rng.choice([0.05, 0.1, 0.5, 1.0]))
        worst = max(worst, abs(supcon_loss(reps, labels, tau).loss - supcon_naive(reps, labels, tau)))
    ok = worst <= 1e-10 and time.perf_counter() - t0 < 5
    record(1, "loss oracle equivalence", ok, f"max |stable - naive| = {worst:.2e} over 200 batches (<= 1e-10)", t0)


def _head_loss(head, z, labels, tau):
    shapes = [p.shape for p in head.parameters()]

    def loss_of(flat):
        params, offset = [], 0
        for shape in shapes:
            n = int(np.prod(shape))
            params.append(flat[offset : offset + n].reshape(shape))
            offset += n
        return supcon_naive(forward(head.with_parameters(params), z), labels, tau)

    return loss_of


def test_2_gradients_match_finite_differences():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst_rep = worst_head = 0.0
    for case in range(50):
        reps, labels = random_batch(rng)
        tau = float(rng.choice([0.1, 0.5, 1.0]))
        analytic = supcon_loss(reps, labels, tau).grad
        numeric = central_difference(lambda x: supcon_naive(x, labels, tau), reps, step=1e-5)
        worst_rep = max(worst_rep, max_relative_error(analytic, numeric, floor=1e-3))

        # end to end through the head and the normalization Jacobian
        b, d = int(rng.integers(3, 8)), int(rng.integers(2, 6))
        head = init_head(d, hidden=None if case % 2 else 5, seed=case)
        head = head.with_parameters([p + 0.1 * rng.standard_normal(p.shape) for p in head.parameters()])
        z = rng.standard_normal((b, d))
        labels = rng.integers(0, 2, size=b)
        res = supcon_loss(forward(head, z), labels, tau)
        analytic = np.concatenate([g.ravel() for g in backward(head, z, res.grad)])
        flat = np.concatenate([p.ravel() for p in head.parameters()])
        numeric = central_difference(_head_loss(head, z, labels, tau), flat, step=1e-5)
        worst_head = max(worst_head, max_relative_error(analytic, numeric, floor=1e-3))
    ok = max(worst_rep, worst_head) <= 1e-4 and time.perf_counter() - t0 < 30
    detail = f"max relative error {worst_rep:.1e} (representations), {worst_head:.1e} (head parameters), 50 cases each"
    record(2, "gradient correctness", ok, detail, t0)


def test_3_batches_cover_every_class_and_center(default_data):
    t0 = time.perf_counter()
    m, t = default_data.manifest, default_data.table
    train = t.subset(m.split_mask("train"))
    classes, centers = range(len(m.classes)), range(len(m.centers))
    # the full training pool, and a few-shot pool with 2 slides per class at the second center
    shots = select_shots(train, 1, 2, len(m.classes), np.random.default_rng(0))
    few = np.concatenate([np.flatnonzero(train.centers == 0), shots])
    violations = 0
    for pool, seed in ((np.arange(len(train)), 1), (few, 2)):
        labels, cents = train.labels[pool], train.centers[pool]
        plan = make_batches(labels, cents, BatchSpec(), seed, steps=1000)
        violations += sum(len(cross_domain_violations(b, labels, cents, classes, centers)) for b in plan.batches)
    ok = violations == 0 and time.perf_counter() - t0 < 5
    record(3, "constraint satisfaction", ok, f"{violations} missing (class, center) cells in 2 x 1000 batches", t0)


def test_4_cross_center_uplift():
    t0 = time.perf_counter()
    uplift, within, cross = [], [], []
    for seed in range(5):
        d = generate_split(SynthConfig(seed=seed))
        g = {(r.method, r.train_centers, r.test_centers): r.bacc
             for r in run_crosscenter_grid(d.manifest, d.table, TrainConfig(), seeds=(seed,))}
        uplift.append(g["scda", "H1+H2", "H1+H2"] - g["raw", "H1+H2", "H1+H2"])
        within.append((g["raw", "H1", "H1"] + g["raw", "H2", "H2"]) / 2)
        cross.append((g["raw", "H1", "H2"] + g["raw", "H2", "H1"]) / 2)
    mean_uplift = float(np.mean(uplift))
    drop = float(np.mean(within) - np.mean(cross))
    ok = mean_uplift >= 0.10 and drop >= 0.15 and time.perf_counter() - t0 < 180
    detail = (f"merged-test uplift {mean_uplift:.3f} (>= 0.10); raw within {np.mean(within):.3f} "
              f"vs cross {np.mean(cross):.3f}, drop {drop:.3f} (>= 0.15)")
    record(4, "cross-center uplift", ok, detail, t0)


def test_5_few_shot_curve(default_data):
    t0 = time.perf_counter()
    rows = run_fewshot(default_data.manifest, default_data.table, FewShotConfig(), TrainConfig())
    mean = {(a[0], a[2], a[3]): a[5] for a in aggregate_rows(rows)}
    gain = mean["scda", "H2", "10"] - mean["scda", "H2", "2"]
    base = [mean["raw", "H1", "0"]] + [mean["scda", "H1", str(k)] for k in (2, 4, 6, 8, 10)]
    spread = max(base) - min(base)
    ok = gain >= 0.05 and spread <= 0.05 and time.perf_counter() - t0 < 300
    detail = (f"held-out center k=2 {mean['scda', 'H2', '2']:.3f} -> k=10 {mean['scda', 'H2', '10']:.3f}, "
              f"gain {gain:.3f} (>= 0.05); base-center spread over k=0..10 {spread:.3f} (<= 0.05)")
    record(5, "few-shot curve", ok, detail, t0)


def _unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


def test_6_macenko_recovery():
    t0 = time.perf_counter()
    # both stains absorb in every channel, so pure-stain pixels pass the tissue threshold
    pairs = [
        (_unit([0.65, 0.70, 0.29]), _unit([0.30, 0.80, 0.52])),
        (_unit([0.75, 0.60, 0.30]), _unit([0.25, 0.80, 0.55])),
    ]
    worst_angle = worst_conc = worst_pixel = 0.0
    for p, (h, e) in enumerate(pairs):
        assert angle_deg(h, e) >= 20
        truth = StainProfile(np.column_stack([h, e]), [1.0, 1.0])
        for seed in range(3):
            rng = np.random.default_rng(10 * p + seed)
            fields = rng.uniform(0, 1.2, (2, 96, 96))
            kind = rng.integers(0, 3, (96, 96))
            fields[0][kind == 1] = 0
            fields[1][kind == 2] = 0
            img = synthesize_stain_image(truth, fields)
            fit = estimate_stain_profile(img)
            worst_angle = max(worst_angle, angle_deg(fit.stain_matrix[:, 0], h), angle_deg(fit.stain_matrix[:, 1], e))
            expected = np.percentile(fields.reshape(2, -1), 99, axis=1)
            worst_conc = max(worst_conc, float(np.max(np.abs(fit.max_concentrations / expected - 1))))
            out = normalize_to_target(img, fit, fit)
            worst_pixel = max(worst_pixel, float(np.max(np.abs(out.astype(int) - img.astype(int)))))
    ok = worst_angle < 5 and worst_conc < 0.10 and worst_pixel <= 2 and time.perf_counter() - t0 < 30
    detail = (f"worst stain angle {worst_angle:.2f} deg (< 5), concentration error {100 * worst_conc:.1f}% (< 10), "
              f"self-normalization change {worst_pixel:.0f} units (<= 2)")
    record(6, "Macenko recovery", ok, detail, t0)


def test_7_reports_are_byte_identical(tmp_path, monkeypatch):
    t0 = time.perf_counter()
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data)]) == 0
    emb = str(data / "embeddings.json")
    outputs = {}
    # the second run uses worker threads; the reports must not notice
    for run, threads in (("a", "0"), ("b", "4")):
        monkeypatch.setenv("SCDA_THREADS", threads)
        for command in ("grid", "fewshot"):
            out = tmp_path / run / command
            assert main([command, "--input", emb, "--out", str(out)]) == 0
            for name in ("report.csv", "aggregate.csv"):
                outputs.setdefault((command, name), []).append((out / name).read_bytes())
    same = all(a == b for a, b in outputs.values())
    record(7, "determinism", same, f"{len(outputs)} CSV reports compared across serial and threaded reruns", t0)


def test_8_balanced_accuracy():
    t0 = time.perf_counter()
    rng = np.random.default_rng(808)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 9))
        counts = rng.integers(0, 40, size=(n, n))
        counts[int(rng.integers(n))] = 0  # sometimes leaves a class without test samples
        counts[0, 0] += 1
        absent = np.any(counts.sum(axis=1) == 0)
        with pytest.warns(AbsentClassWarning) if absent else contextlib.nullcontext():
            value = balanced_accuracy(ConfusionMatrix(counts))
        worst = max(worst, abs(value - bacc_by_hand(counts)))

    trials = 10_000
    truth = rng.integers(0, 6, trials)
    guess = rng.integers(0, 6, trials)
    counts = np.zeros((6, 6), dtype=int)
    np.add.at(counts, (truth, guess), 1)
    random_bacc = balanced_accuracy(counts)
    # per-class recall is Binomial(n_c, 1/6) / n_c; BACC averages six of them
    n_c = counts.sum(axis=1)
    sigma = np.sqrt(np.sum((1 / 6) * (5 / 6) / n_c)) / 6
    ok = worst <= 1e-12 and abs(random_bacc - 1 / 6) <= 3 * sigma
    detail = (f"max error vs hand computation {worst:.1e} on 20 matrices; random 6-class BACC {random_bacc:.4f} "
              f"in 1/6 +- 3 sigma ({1 / 6 - 3 * sigma:.4f}, {1 / 6 + 3 * sigma:.4f})")
    record(8, "metric correctness", ok, detail, t0)
