import numpy as np
import pytest

from siamsearch.config import DataConfig
from siamsearch.data import (
    CIFAR_TEST_FILE,
    CIFAR_TRAIN_FILES,
    RECORD_BYTES,
    AugmentPolicy,
    ImageDataset,
    augment_batch,
    augment_pair,
    augment_rng,
    batch_indices,
    load_cifar10_bin,
    load_dataset,
    normalize,
    split_train_val,
    synth_dataset,
    write_cifar10_bin,
)
from siamsearch.errors import CorruptRecordError, DatasetFormatError, RangeError, ShapeError


def cifar_bytes(labels: list[int], fill: int = 128) -> bytes:
    records = np.full((len(labels), RECORD_BYTES), fill, dtype=np.uint8)
    records[:, 0] = labels
    return records.tobytes()


def test_cifar_records_decode_to_channel_major_images(tmp_path):
    records = np.zeros((2, RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = [3, 9]
    records[0, 1] = 255  # red plane, top-left pixel
    records[1, 1 + 1024 + 5] = 51  # green plane, row 0 col 5
    path = tmp_path / "data_batch_1.bin"
    path.write_bytes(records.tobytes())

    ds = load_cifar10_bin(path)
    assert ds.images.shape == (2, 3, 32, 32)
    assert ds.images.dtype == np.float32
    np.testing.assert_array_equal(ds.labels, [3, 9])
    assert ds.images[0, 0, 0, 0] == pytest.approx(1.0)
    assert ds.images[1, 1, 0, 5] == pytest.approx(0.2)
    assert ds.num_classes == 10


def test_cifar_truncated_file(tmp_path):
    path = tmp_path / "data_batch_1.bin"
    path.write_bytes(cifar_bytes([1, 2])[:-7])
    with pytest.raises(DatasetFormatError):
        load_cifar10_bin(path)


def test_cifar_label_out_of_range(tmp_path):
    path = tmp_path / "data_batch_1.bin"
    path.write_bytes(cifar_bytes([1, 10]))
    with pytest.raises(CorruptRecordError):
        load_cifar10_bin(path)


def test_cifar_directory_and_limit(tmp_path):
    for i, name in enumerate(CIFAR_TRAIN_FILES[:2]):
        (tmp_path / name).write_bytes(cifar_bytes([i] * 5))
    (tmp_path / CIFAR_TEST_FILE).write_bytes(cifar_bytes([7] * 3))

    train = load_cifar10_bin(tmp_path, train=True)
    assert len(train) == 10
    np.testing.assert_array_equal(train.class_counts()[:2], [5, 5])
    assert len(load_cifar10_bin(tmp_path, train=False)) == 3

    subset = load_cifar10_bin(tmp_path, train=True, limit=4, seed=1)
    again = load_cifar10_bin(tmp_path, train=True, limit=4, seed=1)
    assert len(subset) == 4
    np.testing.assert_array_equal(subset.labels, again.labels)


def test_cifar_missing_directory_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cifar10_bin(tmp_path)


def test_cifar_writer_round_trips_pixels(tmp_path):
    ds = synth_dataset(0, 6, num_classes=3, size=32)
    path = write_cifar10_bin(ds, tmp_path / "batch.bin")
    assert path.stat().st_size == 6 * RECORD_BYTES
    back = load_cifar10_bin(path)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_allclose(back.images, ds.images, atol=0.5 / 255 + 1e-6)


def test_synthetic_dataset_is_pure_and_balanced():
    a = synth_dataset(4, 21, num_classes=4, size=8)
    b = synth_dataset(4, 21, num_classes=4, size=8)
    np.testing.assert_array_equal(a.images, b.images)
    counts = a.class_counts()
    assert counts.max() - counts.min() <= 1
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0
    assert not np.array_equal(a.images, synth_dataset(5, 21, num_classes=4, size=8).images)


def test_synthetic_dataset_argument_checks():
    with pytest.raises(RangeError):
        synth_dataset(0, 2, num_classes=3)
    with pytest.raises(RangeError):
        synth_dataset(0, 4, num_classes=2, size=4)


def test_dataset_validation():
    with pytest.raises(ShapeError):
        ImageDataset(np.zeros((2, 1, 4, 4), dtype=np.float32))
    with pytest.raises(RangeError):
        ImageDataset(np.zeros((2, 3, 4, 4), dtype=np.float32), np.array([0, 2]), num_classes=2)
    ds = ImageDataset(np.zeros((2, 3, 4, 4), dtype=np.float32))
    assert not ds.images.flags.writeable


def test_load_dataset_test_split_differs_from_train():
    cfg = DataConfig(n=10, test_n=6, classes=2, size=8)
    train, test = load_dataset(cfg, train=True), load_dataset(cfg, train=False)
    assert (len(train), len(test)) == (10, 6)
    assert not np.array_equal(train.images[:6], test.images)


def test_split_is_disjoint_seeded_and_ceil_sized():
    ds = synth_dataset(0, 11, num_classes=2, size=8)
    d_t, d_v = split_train_val(ds, 0.5, seed=3)
    assert (len(d_t), len(d_v)) == (6, 5)
    merged = np.concatenate([d_t.images, d_v.images]).reshape(11, -1)
    assert len({row.tobytes() for row in merged}) == 11

    again, _ = split_train_val(ds, 0.5, seed=3)
    np.testing.assert_array_equal(again.images, d_t.images)


def test_split_refuses_an_empty_side():
    ds = synth_dataset(0, 2, num_classes=1, size=8)
    with pytest.raises(RangeError):
        split_train_val(ds, 0.9, seed=0)
    with pytest.raises(RangeError):
        split_train_val(ds, 1.0, seed=0)


def test_batch_indices_cover_each_item_once_per_epoch():
    batches = batch_indices(10, 4, seed=0, epoch=2)
    flat = np.concatenate(batches)
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(flat.tolist()) == list(range(10))
    np.testing.assert_array_equal(np.concatenate(batch_indices(10, 4, seed=0, epoch=2)), flat)
    assert not np.array_equal(np.concatenate(batch_indices(10, 4, seed=0, epoch=3)), flat)


def test_batch_indices_drop_a_single_item_tail():
    batches = batch_indices(9, 4, seed=0, epoch=0)
    assert [len(b) for b in batches] == [4, 4]
    assert [len(b) for b in batch_indices(9, 4, seed=0, epoch=0, min_batch=1)] == [4, 4, 1]


def test_augment_pair_shapes_and_independence(rng):
    img = synth_dataset(0, 1, num_classes=1, size=16).images[0]
    v1, v2 = augment_pair(img, AugmentPolicy(), rng)
    assert v1.shape == v2.shape == (3, 16, 16)
    assert v1.dtype == np.float32
    assert not np.array_equal(v1, v2)


def test_augmentation_is_a_function_of_seed_epoch_and_stream():
    images = synth_dataset(0, 3, num_classes=1, size=8).images
    a = augment_batch(images, AugmentPolicy(), augment_rng(1, 0, 0))
    b = augment_batch(images, AugmentPolicy(), augment_rng(1, 0, 0))
    c = augment_batch(images, AugmentPolicy(), augment_rng(1, 0, 1))
    np.testing.assert_array_equal(a[0], b[0])
    assert not np.array_equal(a[0], c[0])


def test_disabled_augmentation_gives_identical_normalized_views():
    images = synth_dataset(0, 2, num_classes=1, size=8).images
    policy = AugmentPolicy(enabled=False)
    v1, v2 = augment_batch(images, policy, augment_rng(0, 0))
    np.testing.assert_array_equal(v1, v2)
    np.testing.assert_allclose(v1[0], normalize(images[0], policy))


def test_flip_only_policy_mirrors(rng):
    img = synth_dataset(0, 1, num_classes=1, size=8).images[0]
    policy = AugmentPolicy.only(flip_prob=1.0)
    v1, _ = augment_pair(img, policy, rng)
    np.testing.assert_allclose(v1, normalize(img[:, :, ::-1], policy))


def test_grayscale_only_policy_equalizes_channels(rng):
    img = synth_dataset(0, 1, num_classes=1, size=8).images[0]
    policy = AugmentPolicy.only(grayscale_prob=1.0, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))
    v1, _ = augment_pair(img, policy, rng)
    np.testing.assert_allclose(v1[0], v1[1])
    np.testing.assert_allclose(v1[1], v1[2])


def test_augment_pair_rejects_batches(rng):
    with pytest.raises(ShapeError):
        augment_pair(np.zeros((2, 3, 8, 8), dtype=np.float32), AugmentPolicy(), rng)
