"""Synthetic dataset generation and the raw binary container."""

import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ilpdlab import data
from ilpdlab.data import (
    DatasetBadMagic,
    DatasetChecksumMismatch,
    DatasetTruncated,
    DatasetValidationError,
    generate_synthetic,
    load_raw,
    save_raw,
    train_test_split,
)


def test_generation_shapes_and_range():
    ds = generate_synthetic(0, 48)
    assert ds.images.shape == (48, 1, 16, 16)
    assert ds.images.dtype == np.float32
    assert ds.labels.shape == (48,)
    assert ds.class_count == 8
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_generation_deterministic_and_seed_sensitive():
    a = generate_synthetic(3, 32)
    b = generate_synthetic(3, 32)
    c = generate_synthetic(4, 32)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, c.images)


def test_labels_are_balanced():
    ds = generate_synthetic(1, 80)
    counts = np.bincount(ds.labels, minlength=8)
    assert counts.tolist() == [10] * 8


def test_pixels_are_u8_quantized():
    ds = generate_synthetic(2, 16)
    scaled = ds.images * 255.0
    assert np.abs(scaled - np.round(scaled)).max() == 0.0


def test_classes_are_separable():
    # mean images of different classes should differ clearly
    ds = generate_synthetic(5, 160, noise=0.1)
    means = np.stack([ds.images[ds.labels == c].mean(axis=0) for c in range(8)])
    for a in range(8):
        for b in range(a + 1, 8):
            assert np.abs(means[a] - means[b]).max() > 0.2, (a, b)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(8, 40))
def test_generation_valid_for_any_seed(seed, n):
    ds = generate_synthetic(seed, n)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert (ds.labels < 8).all() and (ds.labels >= 0).all()


def test_train_test_split():
    ds = generate_synthetic(0, 40)
    train, test = train_test_split(ds, 30)
    assert len(train) == 30 and len(test) == 10
    assert np.array_equal(np.concatenate([train.images, test.images]), ds.images)


def test_roundtrip_bit_exact(tmp_path):
    ds = generate_synthetic(6, 24)
    path = tmp_path / "d.ilpdds"
    save_raw(ds, path)
    back = load_raw(path)
    assert np.array_equal(back.images, ds.images)
    assert np.array_equal(back.labels, ds.labels)
    assert back.class_count == ds.class_count


def test_load_bad_magic(tmp_path):
    path = tmp_path / "d.ilpdds"
    save_raw(generate_synthetic(0, 8), path)
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(DatasetBadMagic):
        load_raw(path)


def test_load_truncated(tmp_path):
    path = tmp_path / "d.ilpdds"
    save_raw(generate_synthetic(0, 8), path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 40])
    with pytest.raises(DatasetTruncated):
        load_raw(path)


def test_load_corrupt_pixel(tmp_path):
    path = tmp_path / "d.ilpdds"
    save_raw(generate_synthetic(0, 8), path)
    raw = bytearray(path.read_bytes())
    raw[60] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(DatasetChecksumMismatch):
        load_raw(path)


def test_load_bad_label_names_record(tmp_path):
    ds = generate_synthetic(0, 8)
    path = tmp_path / "d.ilpdds"
    save_raw(ds, path)
    raw = bytearray(path.read_bytes())
    # patch label of record 3 to an out-of-range value, re-seal the CRC
    label_off = len(raw) - 4 - 2 * len(ds) + 2 * 3
    raw[label_off : label_off + 2] = struct.pack("<H", 200)
    body = bytes(raw[:-4])
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    with pytest.raises(DatasetValidationError, match="record 3"):
        load_raw(path)
