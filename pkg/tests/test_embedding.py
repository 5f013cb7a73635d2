import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scda.embedding import (
    DatasetManifest,
    SlideBag,
    SlideRecord,
    bgap,
    l2_normalize,
    load_bags,
    load_embeddings,
    read_matrix,
    save_embeddings,
    split_dataset,
    write_matrix,
    write_manifest,
)
from scda.errors import (
    BadMagic,
    DegenerateFraction,
    DimensionMismatch,
    EmptyBag,
    EmptyCell,
    ManifestError,
    NonFiniteInput,
    TruncatedFile,
    VersionMismatch,
    ZeroVector,
)


def make_manifest(cells: dict[tuple[str, str], int]) -> DatasetManifest:
    classes = sorted({c for c, _ in cells})
    centers = sorted({h for _, h in cells})
    slides = []
    for (c, h), n in sorted(cells.items()):
        slides += [SlideRecord(f"{h}-{c}-{i}", h, c, 10) for i in range(n)]
    return DatasetManifest(classes, centers, slides)


# -- bgap -----------------------------------------------------------------


def test_bgap_identical_rows_returns_row():
    v = np.array([0.25, -1.5, 3.0])
    z = bgap(SlideBag("s", "A", 0, np.tile(v, (3, 1)))).z
    np.testing.assert_array_equal(z, v)


def test_bgap_two_rows():
    z = bgap(SlideBag("s", "A", 1, np.array([[1.0, 0.0], [0.0, 1.0]])))
    np.testing.assert_array_equal(z.z, [0.5, 0.5])
    assert (z.slide_id, z.center_id, z.class_label) == ("s", "A", 1)


patch_matrices = arrays(
    np.float64,
    st.tuples(st.integers(1, 12), st.integers(2, 6)),
    elements=st.floats(-1e3, 1e3, allow_nan=False),
)


@given(patch_matrices, st.randoms(use_true_random=False))
def test_bgap_permutation_invariant_and_bounded(patches, rnd):
    order = list(range(len(patches)))
    rnd.shuffle(order)
    z = bgap(SlideBag("s", "A", 0, patches)).z
    z_perm = bgap(SlideBag("s", "A", 0, patches[order])).z
    np.testing.assert_array_equal(z, z_perm)
    assert np.all(z >= patches.min(axis=0) - 1e-9)
    assert np.all(z <= patches.max(axis=0) + 1e-9)


def test_bgap_errors():
    with pytest.raises(EmptyBag):
        SlideBag("s", "A", 0, np.zeros((0, 4)))
    with pytest.raises(NonFiniteInput):
        bgap(SlideBag("s", "A", 0, np.array([[1.0, np.nan]])))


# -- l2_normalize -------------------------------------------------------------


def test_l2_normalize_examples():
    np.testing.assert_allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8], atol=1e-15)
    u = np.array([0.6, 0.8])
    np.testing.assert_allclose(l2_normalize(u), u, atol=1e-15)
    with pytest.raises(ZeroVector):
        l2_normalize(np.zeros(2))


@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(-1e6, 1e6)).filter(lambda v: np.linalg.norm(v) > 1e-6))
def test_l2_normalize_unit_norm(v):
    assert abs(np.linalg.norm(l2_normalize(v)) - 1.0) < 1e-12


# -- split ------------------------------------------------------------------


def test_split_counts_and_min_train_rule():
    m = make_manifest({("a", "H1"): 10, ("a", "H2"): 1, ("b", "H1"): 2, ("b", "H2"): 5})
    split = split_dataset(m, 0.8, seed=3)
    counts = {}
    for s in split.slides:
        key = (s.label, s.center)
        counts.setdefault(key, [0, 0])[split.splits[s.id] == "test"] += 1
    assert counts[("a", "H1")] == [8, 2]
    assert counts[("a", "H2")] == [1, 0]
    assert counts[("b", "H1")] == [1, 1]  # round(1.6) = 2 capped to leave one test slide
    assert counts[("b", "H2")] == [4, 1]


def test_split_deterministic_and_seed_sensitive():
    m = make_manifest({("a", "H1"): 30, ("b", "H1"): 30, ("a", "H2"): 30, ("b", "H2"): 30})
    assert split_dataset(m, 0.8, 7).splits == split_dataset(m, 0.8, 7).splits
    assert split_dataset(m, 0.8, 7).splits != split_dataset(m, 0.8, 8).splits


@settings(max_examples=40)
@given(
    st.lists(st.integers(1, 15), min_size=4, max_size=4),
    st.floats(0.05, 0.95),
    st.integers(0, 2**31),
)
def test_split_is_stratified_partition(sizes, fraction, seed):
    m = make_manifest(dict(zip([("a", "H1"), ("a", "H2"), ("b", "H1"), ("b", "H2")], sizes)))
    split = split_dataset(m, fraction, seed)
    assert set(split.splits) == {s.id for s in m.slides}
    for (c, h), n in zip([("a", "H1"), ("a", "H2"), ("b", "H1"), ("b", "H2")], sizes):
        n_train = sum(split.splits[s.id] == "train" for s in m.slides if (s.label, s.center) == (c, h))
        expected = max(1, int(np.floor(fraction * n + 0.5)))
        if n >= 2:
            expected = min(expected, n - 1)
        assert n_train == expected


def test_split_errors():
    m = make_manifest({("a", "H1"): 3, ("b", "H2"): 3})
    with pytest.raises(EmptyCell):
        split_dataset(m, 0.8, 0)
    full = make_manifest({("a", "H1"): 3})
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(DegenerateFraction):
            split_dataset(full, bad, 0)


def test_manifest_validation():
    with pytest.raises(ManifestError):
        DatasetManifest(["a"], ["H1"], [SlideRecord("x", "H1", "a"), SlideRecord("x", "H1", "a")])
    with pytest.raises(ManifestError):
        DatasetManifest(["a"], ["H1"], [SlideRecord("x", "H9", "a")])
    with pytest.raises(ManifestError):
        DatasetManifest(["a"], ["H1"], [SlideRecord("x", "H1", "a"), SlideRecord("y", "H1", "a")], splits={"x": "train"})


# -- SCDA1 I/O -----------------------------------------------------------------


def test_embeddings_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    m = split_dataset(make_manifest({("a", "H1"): 4, ("b", "H2"): 3, ("a", "H2"): 2, ("b", "H1"): 2}), 0.8, 1)
    z = rng.standard_normal((len(m.slides), 7)).astype(np.float32)
    z[0, 0] = np.float32(np.finfo(np.float32).tiny)
    save_embeddings(m, z, tmp_path / "manifest.json")
    m2, z2 = load_embeddings(tmp_path / "manifest.json")
    assert z2.tobytes() == z.tobytes()
    assert m2.slides == m.slides and m2.splits == m.splits
    assert m2.classes == m.classes and m2.centers == m.centers


def test_scda1_header_layout(tmp_path):
    write_matrix(tmp_path / "m.scda", np.arange(6, dtype=np.float32).reshape(2, 3))
    raw = (tmp_path / "m.scda").read_bytes()
    assert raw[:4] == b"SCDA"
    assert struct.unpack("<IQQ", raw[4:24]) == (1, 2, 3)
    assert np.frombuffer(raw[24:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_scda1_errors(tmp_path):
    p = tmp_path / "m.scda"
    write_matrix(p, np.ones((10, 4), dtype=np.float32))
    raw = p.read_bytes()

    (tmp_path / "magic.scda").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagic):
        read_matrix(tmp_path / "magic.scda")

    (tmp_path / "ver.scda").write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(VersionMismatch):
        read_matrix(tmp_path / "ver.scda")

    (tmp_path / "short.scda").write_bytes(raw[: 24 + 9 * 4 * 4])  # nine of ten rows
    with pytest.raises(TruncatedFile):
        read_matrix(tmp_path / "short.scda")

    with pytest.raises(DimensionMismatch):
        read_matrix(p, expected_dims=5)


def test_load_bags_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    (tmp_path / "bags").mkdir()
    records, mats = [], []
    for i in range(3):
        mat = rng.standard_normal((5 + i, 4)).astype(np.float32)
        write_matrix(tmp_path / f"bags/s{i}.scda", mat)
        records.append(SlideRecord(f"s{i}", "H1", "a", 5 + i, f"bags/s{i}.scda"))
        mats.append(mat)
    write_manifest(tmp_path / "manifest.json", DatasetManifest(["a"], ["H1"], records))
    bags = load_bags(tmp_path / "manifest.json")
    for bag, mat in zip(bags, mats):
        assert bag.patches.tobytes() == mat.tobytes()
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert doc["slides"][0] == {"id": "s0", "center": "H1", "class": "a", "n_patches": 5, "bag": "bags/s0.scda"}
