import os
import tempfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.neighbors import KNeighborsClassifier

import oracles
from spikehalt.data import (Dataset, channel_stats, encode_binary, gen_synthetic,
                            load_cifar10_binary, load_cifar100_binary, make_batches, write_binary)
from spikehalt.errors import DataFormatError


def test_synthetic_is_deterministic():
    a, b = gen_synthetic(60, 3), gen_synthetic(60, 3)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    assert gen_synthetic(60, 4).images.tobytes() != a.images.tobytes()


def test_synthetic_shape_and_balance():
    for n in (1, 7, 100):
        ds = gen_synthetic(n, 0)
        assert ds.images.shape == (n, 3, 32, 32) and ds.images.dtype == np.uint8
        counts = np.bincount(ds.labels, minlength=3)
        assert np.all(np.abs(counts - n / 3) <= 1)
        px = ds.pixels
        assert px.min() >= 0 and px.max() <= 1
    with pytest.raises(ValueError):
        gen_synthetic(0, 0)


def test_synthetic_is_learnable_by_knn():
    train, test = gen_synthetic(2000, 0), gen_synthetic(500, 1)
    knn = KNeighborsClassifier(5).fit(train.pixels.reshape(2000, -1), train.labels)
    assert knn.score(test.pixels.reshape(500, -1), test.labels) >= 0.7


def two_records():
    raw = bytearray()
    labels = [7, 0]
    planes = []
    for lab, base in zip(labels, (11, 200)):
        px = [(base + i * 13) % 256 for i in range(3072)]
        raw.append(lab)
        raw.extend(px)
        planes.append(px)
    return bytes(raw), labels, planes


def test_hand_built_file_round_trip(tmp_path):
    raw, labels, planes = two_records()
    path = tmp_path / "data_batch.bin"
    path.write_bytes(raw)
    ds = load_cifar10_binary(path)
    assert ds.labels.tolist() == labels
    for img, px in zip(ds.images, planes):
        # R plane first, then G, then B; each row-major 32x32
        assert img[0, 0, 0] == px[0] and img[0, 0, 1] == px[1] and img[0, 1, 0] == px[32]
        assert img[1, 0, 0] == px[1024] and img[2, 31, 31] == px[3071]
    write_binary(ds, tmp_path / "copy.bin")
    assert (tmp_path / "copy.bin").read_bytes() == raw
    assert path.read_bytes() == raw  # source untouched


def test_scaling_endpoints(tmp_path):
    raw = bytes([3]) + bytes([0] * 1536 + [255] * 1536)
    (tmp_path / "f.bin").write_bytes(raw)
    px = load_cifar10_binary(tmp_path / "f.bin").pixels
    assert px.reshape(-1)[0] == 0.0 and px.reshape(-1)[-1] == 1.0


def test_truncated_and_bad_label(tmp_path):
    (tmp_path / "t.bin").write_bytes(bytes(3072))
    with pytest.raises(DataFormatError, match="truncated record at offset 0"):
        load_cifar10_binary(tmp_path / "t.bin")
    raw, _, _ = two_records()
    (tmp_path / "t2.bin").write_bytes(raw + bytes(100))
    with pytest.raises(DataFormatError, match="truncated record at offset 6146"):
        load_cifar10_binary(tmp_path / "t2.bin")
    bad = bytearray(raw)
    bad[3073] = 10
    (tmp_path / "b.bin").write_bytes(bytes(bad))
    with pytest.raises(DataFormatError, match="label byte 10 > 9 at offset 3073"):
        load_cifar10_binary(tmp_path / "b.bin")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 4), st.integers(0, 2 ** 32 - 1))
def test_reader_matches_byte_oracle(n, seed):
    rng = np.random.default_rng(seed)
    rec = np.concatenate([rng.integers(0, 10, (n, 1)), rng.integers(0, 256, (n, 3072))], axis=1)
    raw = rec.astype(np.uint8).tobytes()
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "x.bin")
        with open(p, "wb") as f:
            f.write(raw)
        ds = load_cifar10_binary(p)
    labels, images = oracles.cifar_decode(raw)
    assert ds.labels.tolist() == list(labels)
    np.testing.assert_array_equal(ds.images, images)


def test_cifar100_uses_fine_label(tmp_path):
    ds = gen_synthetic(5, 0)
    ds100 = Dataset(ds.images, [99, 0, 42, 7, 63], 100)
    raw = bytearray(encode_binary(ds100, label_bytes=2))
    raw[0] = 19  # coarse label of record 0
    (tmp_path / "c.bin").write_bytes(bytes(raw))
    back = load_cifar100_binary(tmp_path / "c.bin")
    assert back.labels.tolist() == [99, 0, 42, 7, 63]
    labels, images = oracles.cifar_decode(bytes(raw), label_bytes=2)
    assert list(labels) == [99, 0, 42, 7, 63]
    np.testing.assert_array_equal(back.images, images)


def test_dataset_validation():
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((2, 3, 4)), [0, 1], 2)
    with pytest.raises(DataFormatError):
        Dataset(np.full((1, 3, 2, 2), 1.5), [0], 2)
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((2, 3, 2, 2), np.uint8), [0], 2)
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((1, 3, 2, 2), np.uint8), [2], 2)


def test_batching():
    ds = gen_synthetic(70, 0)
    ep0 = [y.tolist() for _, y in make_batches(ds, 16, seed=5)]
    assert ep0 == [y.tolist() for _, y in make_batches(ds, 16, seed=5)]
    ep1 = [y.tolist() for _, y in make_batches(ds, 16, seed=5, epoch=1)]
    assert ep0 != ep1
    sizes = [len(y) for _, y in make_batches(ds, 16, seed=5)]
    assert sizes == [16, 16, 16, 16, 6]
    x, _ = next(make_batches(ds, 16, seed=5))
    assert x.dtype == np.float32 and x.shape == (16, 3, 32, 32)
    with pytest.raises(ValueError):
        next(make_batches(ds, 0, seed=0))
    with pytest.raises(ValueError):
        next(make_batches(ds.subset(np.arange(0)), 4, seed=0))


def test_normalized_split_has_zero_mean():
    ds = gen_synthetic(200, 0)
    xs = np.concatenate([x for x, _ in make_batches(ds, 64, 0, normalize_with=True)])
    np.testing.assert_allclose(xs.mean(axis=(0, 2, 3)), 0, atol=1e-3)
    np.testing.assert_allclose(xs.std(axis=(0, 2, 3)), 1, atol=1e-3)
    stats = channel_stats(ds)
    xs2 = np.concatenate([x for x, _ in make_batches(ds, 64, 0, normalize_with=stats)])
    np.testing.assert_array_equal(xs, xs2)


def test_flip_only_mirrors():
    ds = gen_synthetic(40, 0)
    plain, _ = next(make_batches(ds, 40, 1, shuffle=False))
    for x, _ in make_batches(ds, 40, 1, shuffle=False, flip=True):
        for a, b in zip(x, plain):
            assert np.array_equal(a, b) or np.array_equal(a, b[:, :, ::-1])
