from pathlib import Path
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinydronet import data as D
from tinydronet.sim import Rect, build_upath_world, collision_label
from tinydronet.sim.world import OBSTACLE, UPathGeometry


@pytest.fixture(scope="module")
def small_ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    return D.generate_synthetic_dataset(list(range(10)), 12, root)


def test_generated_dataset_layout_and_reload(small_ds):
    assert len(small_ds) == 120 and len(small_ds.sequences) == 10
    seq = small_ds.sequences[0]
    seq_dir = small_ds.root / seq.seq_id
    assert (seq_dir / "meta.txt").exists() and (seq_dir / "labels.csv").exists()
    assert seq.frame_path(small_ds.root, 0).exists()
    again = D.load_manifest(small_ds.root / D.MANIFEST_NAME)
    assert again.sequences == small_ds.sequences
    for s in again.samples():
        s.validate()
        assert s.image.shape == (200, 200)
        assert {"scenario", "light", "sequence_id", "timestamp", "height_m"} <= set(s.meta)


def test_generation_is_deterministic(tmp_path, small_ds):
    other = D.generate_synthetic_dataset([3], 12, tmp_path)
    a = next(s for s in small_ds.sequences if s.seq_id == "seq00003")
    assert other.sequences[0].frames == a.frames
    np.testing.assert_array_equal(D.read_pgm(other.sequences[0].frame_path(tmp_path, 5)),
                                  D.read_pgm(a.frame_path(small_ds.root, 5)))


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(D.DatasetError):
        D.generate_synthetic_dataset([0], 2, blocker / "sub")


def test_collision_rule():
    world = build_upath_world()
    # obstacle 1.5 m dead ahead
    box = Rect(1.5, 0.5, 1.8, 1.5, OBSTACLE)
    assert collision_label(world.with_rects([box]), 0.0, 1.0, 0.0) == 1
    # straight corridor, far wall 3 m ahead and nothing in between
    empty = build_upath_world(UPathGeometry(obstacles=()))
    far_x = empty.geometry.length + empty.geometry.width
    assert collision_label(empty, far_x - 3.0, 1.0, 0.0) == 0
    assert collision_label(empty, far_x - 1.0, 1.0, 0.0) == 1
    # pure function of geometry and pose
    assert collision_label(world, 0.3, 0.8, 0.1) == collision_label(world, 0.3, 0.8, 0.1)


def test_straight_flight_is_mostly_zero_yaw(tmp_path):
    cfg = D.GenConfig(noise_fraction=0.0, start_offset=0.0, start_heading=0.0)
    m = D.generate_synthetic_dataset([0, 1, 2], 60, tmp_path, cfg)
    yaw, _ = m.labels()
    counts, _ = np.histogram(yaw, bins=21, range=(-1, 1))
    assert counts.argmax() == 10  # the bin around zero
    assert D.zero_yaw_fraction(m) > 0.2


# --- split -----------------------------------------------------------------------

def _fake_manifest(n_seq, frames_per_seq=3, yaws=None, root="/nonexistent"):
    seqs = []
    k = 0
    for i in range(n_seq):
        frames = []
        for j in range(frames_per_seq):
            y = yaws[k] if yaws is not None else 0.1
            frames.append(D.FrameLabel(j, j * 0.05, y, 0))
            k += 1
        seqs.append(D.SequenceEntry(f"seq{i:05d}", "none", {}, tuple(frames)))
    return D.DatasetManifest(Path(root), tuple(seqs))


def test_split_ten_sequences():
    parts = D.split_dataset(_fake_manifest(10))
    assert [len(p.sequences) for p in parts] == [7, 1, 2]


@given(st.integers(3, 60), st.integers(0, 1000))
def test_split_is_a_sequence_partition(n, seed):
    m = _fake_manifest(n)
    parts = D.split_dataset(m, seed=seed)
    ids = [s.seq_id for p in parts for s in p.sequences]
    assert sorted(ids) == [s.seq_id for s in m.sequences]
    for name, p in zip(D.SPLITS, parts):
        assert all(s.split == name for s in p.sequences)
    assert D.split_dataset(m, seed=seed) == parts


def test_split_errors():
    with pytest.raises(D.DatasetError):
        D.split_dataset(_fake_manifest(2))
    with pytest.raises(D.DatasetError):
        D.split_dataset(_fake_manifest(10), (0.5, 0.5, 0.5))


# --- balancing ---------------------------------------------------------------------

def test_balance_example():
    yaws = [0.0] * 80 + [0.5] * 20
    m = _fake_manifest(10, 10, yaws)
    out = D.balance_split(m, 0.5)
    assert len(out) == 40  # exactly 60 zeros dropped
    assert D.zero_yaw_fraction(out) == 0.5


def test_balance_noops():
    m = _fake_manifest(4, 5, [0.3] * 20)
    assert D.balance_split(m, 0.3) == m
    z = _fake_manifest(4, 5, [0.0] * 20)
    assert D.balance_split(z, 1.0) == z
    with pytest.raises(D.DatasetError):
        D.balance_split(z, 0.0)


@given(st.lists(st.sampled_from([0.0, 0.0005, 0.2, -0.7]), min_size=1, max_size=80),
       st.floats(0.05, 1.0), st.integers(0, 99))
def test_balance_properties(yaws, cap, seed):
    m = _fake_manifest(1, len(yaws), yaws)
    out = D.balance_split(m, cap, seed=seed)
    before = D.zero_yaw_fraction(m)
    after = D.zero_yaw_fraction(out)
    assert after <= before + 1e-12
    assert after <= cap + 1e-12 or after == 0.0 or len(out) == 0
    kept_nonzero = sum(abs(f.yaw_rate) > D.YAW_ZERO_TOL for s in out.sequences for f in s.frames)
    assert kept_nonzero == sum(abs(y) > D.YAW_ZERO_TOL for y in yaws)
    # minimal: dropping one fewer zero would break the cap
    dropped = len(m) - len(out)
    if dropped:
        n_zero = len(yaws) - kept_nonzero
        assert (n_zero - dropped + 1) > cap * (len(yaws) - dropped + 1)


# --- augmentation ------------------------------------------------------------------

images = st.integers(0, 2**32 - 1).map(
    lambda s: np.random.default_rng(s).integers(0, 256, (16, 16)).astype(np.uint8))


def test_augment_examples():
    s = D.Sample(np.arange(40000, dtype=np.uint32).reshape(200, 200).astype(np.uint8), 0.4, 1)
    cfg = D.AugmentConfig(1.0, 0.0, (0, 0), 0.0, (0, 0), 0.0, (3,))
    out = D.augment_sample(s, cfg, np.random.default_rng(0))
    assert out.yaw_rate == -0.4 and out.collision == 1
    np.testing.assert_array_equal(D.flip(D.flip(s.image)), s.image)
    flat = np.full((8, 8), 128, np.uint8)
    np.testing.assert_array_equal(D.brightness(flat, 10), np.full((8, 8), 138, np.uint8))


@settings(max_examples=40, deadline=None)
@given(images, st.floats(-1, 1), st.integers(0, 10_000))
def test_augment_keeps_range_and_labels(img, yaw, seed):
    out, y = D.augment_image(img, yaw, D.AugmentConfig(), np.random.default_rng(seed))
    assert out.dtype == np.uint8 and out.shape == img.shape
    assert abs(y) == abs(yaw)


@given(images, st.floats(0.0, 1.0))
def test_vignette_never_brightens(img, strength):
    assert np.all(D.vignette(img, strength) <= img)


@given(images, st.sampled_from([3, 5]))
def test_blur_of_constant_is_constant(img, k):
    c = np.full_like(img, img[0, 0])
    np.testing.assert_array_equal(D.box_blur(c, k), c)
    b = D.box_blur(img, k)
    assert b.min() >= img.min() and b.max() <= img.max()


def test_flip_mean_yaw_tends_to_zero():
    rng = np.random.default_rng(0)
    cfg = D.AugmentConfig(0.5, 0.0, (0, 0), 0.0, (0, 0), 0.0, (3,))
    img = np.zeros((2, 2), np.uint8)
    ys = np.array([D.augment_image(img, 0.6, cfg, rng)[1] for _ in range(4000)])
    assert abs(ys.mean()) <= 3 * 0.6 / np.sqrt(len(ys))


def test_augment_config_validation():
    with pytest.raises(D.DatasetError):
        D.AugmentConfig(flip_prob=1.5).validate()
    with pytest.raises(D.DatasetError):
        D.AugmentConfig(blur_kernels=(4,)).validate()


# --- loading errors ------------------------------------------------------------------

def _copy_ds(src, dst):
    shutil.copytree(src.root, dst)
    return dst


def test_loader_rejects_bad_yaw_with_row(small_ds, tmp_path):
    root = _copy_ds(small_ds, tmp_path / "c")
    labels = root / small_ds.sequences[1].seq_id / "labels.csv"
    lines = labels.read_text().splitlines()
    parts = lines[3].split(",")
    parts[2] = "1.5"
    lines[3] = ",".join(parts)
    labels.write_text("\n".join(lines) + "\n")
    with pytest.raises(D.DatasetError, match=r"labels\.csv:4: yaw_rate 1\.5"):
        D.load_manifest(root / D.MANIFEST_NAME)


def test_loader_rejects_missing_frame_and_bad_rows(small_ds, tmp_path):
    root = _copy_ds(small_ds, tmp_path / "c")
    seq = small_ds.sequences[0]
    seq.frame_path(root, 2).unlink()
    with pytest.raises(D.DatasetError):
        D.load_manifest(root / D.MANIFEST_NAME)
    D.load_manifest(root / D.MANIFEST_NAME, check_files=False)
    labels = root / seq.seq_id / "labels.csv"
    labels.write_text(labels.read_text() + "not,a,row\n")
    with pytest.raises(D.DatasetError):
        D.load_manifest(root / D.MANIFEST_NAME, check_files=False)


def test_manifest_roundtrip_with_splits(small_ds, tmp_path):
    root = _copy_ds(small_ds, tmp_path / "c")
    m = D.load_manifest(root / D.MANIFEST_NAME)
    parts = D.split_dataset(m, seed=4)
    merged = D.merge_manifests(parts[0], parts[1], D.balance_split(parts[2], 0.3))
    D.write_manifest(merged)
    back = D.load_manifest(root / D.MANIFEST_NAME)
    assert back.sequences == merged.sequences
    assert back.split("test").sequences == merged.split("test").sequences
