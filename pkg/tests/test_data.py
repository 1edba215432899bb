"""Dataset ingestion, stratified subsetting, the blobs fixture, and poison
pack serialization."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poisonbench import data
from poisonbench.errors import DataError


def _write_fake_cifar(root, n_per_file=4, seed=0):
    """Tiny files in the real binary layout: label byte + 3072 pixel bytes."""
    rng = np.random.default_rng(seed)
    for fname in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        records = []
        for _ in range(n_per_file):
            label = rng.integers(0, 10)
            pixels = rng.integers(0, 256, size=3072, dtype=np.uint8)
            records.append(bytes([label]) + pixels.tobytes())
        (root / fname).write_bytes(b"".join(records))


def test_cifar_record_parsing(tmp_path):
    pixels = np.arange(3072, dtype=np.uint8)  # channel-major planes
    record = bytes([6]) + pixels.tobytes()
    for fname in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        (tmp_path / fname).write_bytes(record)
    train, test = data.load_cifar10(tmp_path)
    assert train.n == 5 and test.n == 1
    assert train.labels[0] == 6
    img = train.images[0]
    assert img.shape == (3, 32, 32)
    # byte at flat plane position p holds value p % 256, scaled by /255
    assert img[0, 0, 0] == pytest.approx(0.0)
    assert img[0, 255 // 32, 255 % 32] == pytest.approx(1.0)  # byte 255 -> pixel 1.0
    assert img[1, 0, 0] == pytest.approx((1024 % 256) / 255.0)
    assert img[2, 0, 0] == pytest.approx((2048 % 256) / 255.0)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_cifar_missing_file(tmp_path):
    _write_fake_cifar(tmp_path)
    (tmp_path / "data_batch_3.bin").unlink()
    with pytest.raises(DataError, match="missing"):
        data.load_cifar10(tmp_path)


def test_cifar_bad_length(tmp_path):
    _write_fake_cifar(tmp_path)
    path = tmp_path / "test_batch.bin"
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(DataError, match="multiple"):
        data.load_cifar10(tmp_path)


def test_cifar_subdirectory_fallback(tmp_path):
    sub = tmp_path / "cifar-10-batches-bin"
    sub.mkdir()
    _write_fake_cifar(sub)
    train, test = data.load_cifar10(tmp_path)
    assert train.n == 20


# ---------------------------------------------------------------------------
# subsample
# ---------------------------------------------------------------------------


def _toy_dataset(n_per_class=6, num_classes=3, seed=0):
    rng = np.random.default_rng(seed)
    n = n_per_class * num_classes
    labels = rng.permutation(np.repeat(np.arange(num_classes), n_per_class))
    images = rng.random((n, 3, 4, 4), dtype=np.float32)
    return data.ImageDataset(images, labels, num_classes=num_classes, name="toy")


def test_subsample_counts_and_determinism():
    ds = _toy_dataset()
    sub1 = data.subsample(ds, per_class=2, seed=5)
    sub2 = data.subsample(ds, per_class=2, seed=5)
    assert sub1.n == 6
    assert all((sub1.labels == k).sum() == 2 for k in range(3))
    assert np.array_equal(sub1.orig_indices, sub2.orig_indices)
    assert np.array_equal(sub1.images, sub2.images)


def test_subsample_full_class_is_permutation():
    ds = _toy_dataset()
    sub = data.subsample(ds, per_class=6, seed=1)
    assert sub.n == ds.n
    assert np.array_equal(np.sort(sub.orig_indices), np.arange(ds.n))


def test_subsample_records_original_indices():
    ds = _toy_dataset()
    sub = data.subsample(ds, per_class=3, seed=2)
    assert np.array_equal(sub.images, ds.images[sub.orig_indices])
    assert np.array_equal(sub.labels, ds.labels[sub.orig_indices])


def test_subsample_too_large():
    with pytest.raises(DataError):
        data.subsample(_toy_dataset(), per_class=7, seed=0)


# ---------------------------------------------------------------------------
# blobs fixture
# ---------------------------------------------------------------------------


def test_blobs_shape_and_range():
    ds = data.synth_blobs(10, 4, height=16, seed=3)
    assert ds.n == 40
    assert ds.image_shape == (3, 16, 16)
    assert all((ds.labels == k).sum() == 10 for k in range(4))
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_blobs_seed_determinism():
    a = data.synth_blobs(5, 3, height=16, seed=11)
    b = data.synth_blobs(5, 3, height=16, seed=11)
    c = data.synth_blobs(5, 3, height=16, seed=12)
    assert np.array_equal(a.images, b.images)
    assert not np.array_equal(a.images, c.images)


def test_blobs_share_templates_across_seeds():
    # same class layout for train/test draws: per-class means stay close
    a = data.synth_blobs(40, 3, height=16, seed=1)
    b = data.synth_blobs(40, 3, height=16, seed=2)
    for k in range(3):
        ma = a.images[a.labels == k].mean(axis=0)
        mb = b.images[b.labels == k].mean(axis=0)
        assert float(np.abs(ma - mb).mean()) < 0.05


# ---------------------------------------------------------------------------
# poison pack container
# ---------------------------------------------------------------------------


def _pack(mode=data.CLASS_WISE, m=3, eps=8 / 255, seed=0, shape=(3, 4, 4)):
    rng = np.random.default_rng(seed)
    deltas = rng.uniform(-eps, eps, size=(m,) + shape).astype(np.float32)
    idx = np.arange(m, dtype=np.int64) if mode == data.SAMPLE_WISE else None
    return data.PoisonPack(mode=mode, epsilon=eps, deltas=deltas, source="test:pack",
                           num_classes=3, orig_indices=idx)


@pytest.mark.parametrize("mode", [data.CLASS_WISE, data.SAMPLE_WISE])
def test_pack_roundtrip_bit_exact(tmp_path, mode):
    pack = _pack(mode=mode, m=3 if mode == data.CLASS_WISE else 7)
    path = tmp_path / "p.pzn"
    data.write_poison_pack(pack, path)
    back = data.read_poison_pack(path)
    assert back.mode == pack.mode
    assert back.epsilon == pack.epsilon
    assert back.source == pack.source
    assert back.num_classes == pack.num_classes
    assert np.array_equal(back.deltas, pack.deltas)
    if mode == data.SAMPLE_WISE:
        assert np.array_equal(back.orig_indices, pack.orig_indices)
    # writing the reread pack reproduces the file byte for byte
    path2 = tmp_path / "p2.pzn"
    data.write_poison_pack(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_pack_mode_byte_mapping(tmp_path):
    path = tmp_path / "p.pzn"
    data.write_poison_pack(_pack(mode=data.CLASS_WISE), path)
    assert path.read_bytes()[5] == 0
    data.write_poison_pack(_pack(mode=data.SAMPLE_WISE, m=5), path)
    assert path.read_bytes()[5] == 1


def test_pack_corrupted_epsilon_rejected(tmp_path):
    pack = _pack()
    path = tmp_path / "p.pzn"
    data.write_poison_pack(pack, path)
    raw = bytearray(path.read_bytes())
    # epsilon field sits after magic(4) + version(1) + mode(1)
    raw[6:10] = struct.pack("<f", pack.epsilon / 10.0)
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="budget"):
        data.read_poison_pack(path)


def test_pack_truncation_rejected(tmp_path):
    path = tmp_path / "p.pzn"
    data.write_poison_pack(_pack(), path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(DataError, match="truncated"):
        data.read_poison_pack(path)


def test_pack_bad_magic_rejected(tmp_path):
    path = tmp_path / "p.pzn"
    data.write_poison_pack(_pack(), path)
    path.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(DataError, match="magic"):
        data.read_poison_pack(path)


def test_pack_budget_invariant_enforced():
    deltas = np.zeros((3, 3, 4, 4), dtype=np.float32)
    deltas[0, 0, 0, 0] = 0.5
    with pytest.raises(DataError, match="budget"):
        data.PoisonPack(mode=data.CLASS_WISE, epsilon=8 / 255, deltas=deltas,
                        source="t", num_classes=3)


def test_class_wise_pack_m_must_equal_k():
    deltas = np.zeros((4, 3, 4, 4), dtype=np.float32)
    with pytest.raises(DataError):
        data.PoisonPack(mode=data.CLASS_WISE, epsilon=0.1, deltas=deltas,
                        source="t", num_classes=3)


@settings(max_examples=30, deadline=None)
@given(
    mode=st.sampled_from([data.CLASS_WISE, data.SAMPLE_WISE]),
    m=st.integers(min_value=1, max_value=6),
    seed=st.integers(min_value=0, max_value=1000),
)
def test_pack_serialization_bijective(tmp_path_factory, mode, m, seed):
    if mode == data.CLASS_WISE:
        pack = _pack(mode=mode, m=3, seed=seed)
    else:
        pack = _pack(mode=mode, m=m, seed=seed)
    path = tmp_path_factory.mktemp("packs") / "p.pzn"
    data.write_poison_pack(pack, path)
    back = data.read_poison_pack(path)
    assert np.array_equal(back.deltas, pack.deltas)
    assert back.mode == pack.mode and back.source == pack.source


def test_dataset_invariants():
    with pytest.raises(DataError):
        data.ImageDataset(np.full((2, 3, 2, 2), 1.5, dtype=np.float32),
                          np.zeros(2, dtype=np.int64), num_classes=2, name="bad")
    with pytest.raises(DataError):
        data.ImageDataset(np.zeros((2, 3, 2, 2), dtype=np.float32),
                          np.array([0, 5]), num_classes=2, name="bad")
