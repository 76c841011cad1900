import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustft.data_io import (
    DataError,
    ImageDataset,
    SynthSpec,
    batches,
    class_split,
    load_digits_idx,
    load_idx,
    save_idx,
    synth_clusters,
)


def write_fixture(tmp_path, image_bytes, label_bytes):
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    ip.write_bytes(image_bytes)
    lp.write_bytes(label_bytes)
    return ip, lp


# two 2x2 images, labels 3 and 0
IMAGES = bytes([0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 51, 102, 255, 0, 0, 153])
LABELS = bytes([0, 0, 8, 1, 0, 0, 0, 2, 3, 0])


def test_load_idx_hand_fixture(tmp_path):
    data = load_idx(*write_fixture(tmp_path, IMAGES, LABELS))
    expected = np.array([[[[0, 255], [51, 102]]], [[[255, 0], [0, 153]]]]) / 255.0
    assert data.images.shape == (2, 1, 2, 2)
    assert np.array_equal(data.images, expected)
    assert data.images[0, 0, 0, 1] == 1.0 and data.images[0, 0, 0, 0] == 0.0
    assert list(data.labels) == [3, 0]
    assert data.num_classes == 4


@pytest.mark.parametrize(
    "images,labels",
    [
        (IMAGES, LABELS[:-1]),  # truncated labels
        (IMAGES[:-1], LABELS),  # truncated images
        (IMAGES, bytes([0, 0, 8, 2]) + LABELS[4:]),  # wrong label magic
        (bytes([0, 0, 8, 1]) + IMAGES[4:], LABELS),  # wrong image magic
        (IMAGES, bytes([0, 0, 8, 1, 0, 0, 0, 1, 3])),  # count mismatch
        (IMAGES[:6], LABELS),  # truncated header
    ],
)
def test_load_idx_errors(tmp_path, images, labels):
    with pytest.raises(DataError):
        load_idx(*write_fixture(tmp_path, images, labels))


def test_load_idx_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_idx(tmp_path / "nope", tmp_path / "nope2")


def test_idx_round_trip_is_bitwise(tmp_path):
    data = load_digits_idx()
    save_idx(data, tmp_path / "i", tmp_path / "l")
    again = load_idx(tmp_path / "i", tmp_path / "l", num_classes=10)
    assert np.array_equal(data.images, again.images)
    assert np.array_equal(data.labels, again.labels)


def test_bundled_digits():
    data = load_digits_idx()
    assert data.images.shape == (1797, 1, 8, 8)
    assert data.num_classes == 10
    assert 0.0 <= data.images.min() and data.images.max() <= 1.0


def test_dataset_invariants():
    with pytest.raises(DataError):
        ImageDataset(np.full((1, 1, 2, 2), 1.5), [0], 2)
    with pytest.raises(DataError):
        ImageDataset(np.zeros((1, 1, 2, 2)), [2], 2)
    with pytest.raises(DataError):
        ImageDataset(np.zeros((0, 1, 2, 2)), [], 2)


def test_synth_zero_noise_gives_templates():
    spec = SynthSpec(n_per_class=4, dims=(1, 3, 3), num_classes=3, noise_sigma=0.0, seed=1)
    data = synth_clusters(spec)
    for k in range(3):
        block = data.images[data.labels == k]
        assert np.all(block == block[0])
    assert not np.array_equal(data.images[0], data.images[4])


@pytest.mark.parametrize("n_basis", [0, 6])
def test_synth_is_deterministic_and_in_domain(n_basis):
    spec = SynthSpec(n_per_class=20, dims=(1, 4, 4), num_classes=4, noise_sigma=0.3, seed=5, n_basis=n_basis)
    a, b = synth_clusters(spec), synth_clusters(spec)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0
    assert np.bincount(a.labels).tolist() == [20] * 4


def test_class_split_relabels_and_is_disjoint():
    data = load_digits_idx()
    split = class_split(data, range(5), range(5, 10), 0.25, seed=0)
    assert split.source.num_classes == 5 and split.target_train.num_classes == 5
    assert set(split.source.labels) == set(range(5))
    assert set(split.target_train.labels) | set(split.target_test.labels) == set(range(5))
    assert not set(split.target_train.ids) & set(split.target_test.ids)
    # remap is the order-preserving bijection 5..9 -> 0..4
    orig = data.labels[split.target_test.ids]
    assert np.array_equal(orig - 5, split.target_test.labels)
    # every selected example appears exactly once
    all_ids = np.concatenate([split.source.ids, split.target_train.ids, split.target_test.ids])
    assert sorted(all_ids) == list(range(len(data)))


def test_class_split_errors():
    data = load_digits_idx()
    with pytest.raises(DataError):
        class_split(data, {0, 1}, {1, 2}, 0.2, 0)
    with pytest.raises(DataError):
        class_split(data, {0}, {1}, 1.0, 0)
    with pytest.raises(DataError):
        class_split(data, set(), {1}, 0.2, 0)


def test_batches_sizes_and_order():
    data = ImageDataset(np.linspace(0, 1, 10).reshape(10, 1, 1, 1), np.arange(10) % 2, 2)
    parts = batches(data, 3)
    assert [len(y) for _, y in parts] == [3, 3, 3, 1]
    assert np.array_equal(np.concatenate([x for x, _ in parts]), data.images)
    s1 = batches(data, 3, shuffle_seed=(4, 1))
    s2 = batches(data, 3, shuffle_seed=(4, 1))
    assert all(np.array_equal(a[0], b[0]) for a, b in zip(s1, s2))
    with pytest.raises(DataError):
        batches(data, 0)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 40), bs=st.integers(1, 50), seed=st.integers(0, 1000))
def test_batches_partition_the_dataset(n, bs, seed):
    data = ImageDataset(np.linspace(0, 1, n).reshape(n, 1, 1, 1), np.zeros(n, int), 2)
    parts = batches(data, bs, shuffle_seed=seed)
    got = np.sort(np.concatenate([x.ravel() for x, _ in parts]))
    assert np.array_equal(got, data.images.ravel())
    assert all(len(y) == bs for _, y in parts[:-1])
