import numpy as np
import pytest

from chanmap.data import (
    CIFAR_MEAN,
    CIFAR_STD,
    RECORD_BYTES,
    DataError,
    decode_cifar_records,
    encode_cifar_record,
    gen_synthetic,
    load_cifar10_binary,
    nearest_centroid_accuracy,
)


def _records(rng, labels):
    images = rng.integers(0, 256, (len(labels), 3, 32, 32), dtype=np.uint8)
    return images, b"".join(encode_cifar_record(im, lab) for im, lab in zip(images, labels))


def test_two_records_decode(rng):
    images, raw = _records(rng, [3, 7])
    assert len(raw) == 2 * RECORD_BYTES
    x, y = decode_cifar_records(raw)
    np.testing.assert_array_equal(y, [3, 7])
    np.testing.assert_array_equal(x, images)
    # byte round trip
    assert b"".join(encode_cifar_record(a, int(b)) for a, b in zip(x, y)) == raw


def test_bad_label_names_the_record(rng):
    _, raw = _records(rng, [1, 11, 2])
    with pytest.raises(DataError, match=r"record 1: label byte 11"):
        decode_cifar_records(raw)
    with pytest.raises(DataError, match=r"record 5"):
        decode_cifar_records(raw, offset=4)


def test_truncated_file(rng):
    _, raw = _records(rng, [0])
    with pytest.raises(DataError, match="truncated"):
        decode_cifar_records(raw[:-5])


def test_loader_normalizes_and_limits(rng, tmp_path):
    images, raw = _records(rng, list(range(10)) * 2)
    (tmp_path / "data_batch_1.bin").write_bytes(raw)
    (tmp_path / "test_batch.bin").write_bytes(raw[: 3 * RECORD_BYTES])
    ds = load_cifar10_binary(tmp_path)
    assert len(ds) == 20 and ds.shape == (3, 32, 32)
    expected = (images[4, 1] / 255.0 - CIFAR_MEAN[1]) / CIFAR_STD[1]
    np.testing.assert_allclose(ds.images[4, 1], expected, rtol=1e-5, atol=1e-5)
    assert len(load_cifar10_binary(tmp_path, split="test")) == 3
    small = load_cifar10_binary(tmp_path, limit=5, seed=1)
    assert len(small) == 5
    np.testing.assert_array_equal(small.labels, load_cifar10_binary(tmp_path, limit=5, seed=1).labels)


def test_loader_missing(tmp_path, monkeypatch):
    with pytest.raises(DataError, match="no data_batch"):
        load_cifar10_binary(tmp_path)
    monkeypatch.delenv("CHANMAP_DATA", raising=False)
    with pytest.raises(DataError, match="CHANMAP_DATA"):
        load_cifar10_binary()


def test_synthetic_deterministic():
    a, b = gen_synthetic(4, 40, seed=5), gen_synthetic(4, 40, seed=5)
    assert a.images.tobytes() == b.images.tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)
    assert gen_synthetic(4, 40, seed=6).images.tobytes() != a.images.tobytes()


def test_synthetic_balanced():
    for n in (10, 37, 101):
        counts = np.bincount(gen_synthetic(10, n, seed=0, shape=(1, 4, 4)).labels, minlength=10)
        assert counts.max() - counts.min() <= 1


def test_synthetic_is_separable():
    train = gen_synthetic(10, 1000, seed=0)
    test = gen_synthetic(10, 500, seed=0, split="test")
    assert nearest_centroid_accuracy(train, test) >= 0.95


def test_validation_split():
    ds = gen_synthetic(3, 30, seed=0, shape=(1, 2, 2))
    tr, va = ds.split_validation(0.2, seed=4)
    assert (len(tr), len(va)) == (24, 6)
    assert va.split == "val"
    with pytest.raises(DataError):
        ds.split_validation(1.0, 0)


def test_dataset_validation():
    with pytest.raises(DataError, match="two classes"):
        gen_synthetic(1)
    from chanmap.data import Dataset

    with pytest.raises(DataError, match="labels must"):
        Dataset(np.zeros((2, 1, 1, 1)), [0, 5], 3)
