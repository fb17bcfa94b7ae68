"""Deterministic procedural image-classification dataset plus its raw
binary file format.

Eight grayscale shape classes rendered at a configurable size with
per-example jitter and additive noise.  Pixels are quantized to the u8
grid at generation time, so the on-disk u8 format roundtrips bit-exactly.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .engine import DTYPE


@dataclass
class Dataset:
    images: np.ndarray  # (n, 1, size, size) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64, < class_count
    class_count: int

    def __len__(self):
        return len(self.images)

    def slice(self, start, stop):
        return Dataset(self.images[start:stop], self.labels[start:stop], self.class_count)


class DatasetFileError(RuntimeError):
    pass


class DatasetBadMagic(DatasetFileError):
    pass


class DatasetTruncated(DatasetFileError):
    pass


class DatasetChecksumMismatch(DatasetFileError):
    pass


class DatasetValidationError(DatasetFileError):
    pass


def _coords(size):
    r = np.arange(size)
    return np.meshgrid(r, r, indexing="ij")


def _render(cls, size, rng):
    """One grayscale shape image, before noise.  Classes:
    0 horizontal bar, 1 vertical bar, 2 filled disk, 3 ring, 4 cross,
    5 checkerboard, 6 main-diagonal stripe, 7 anti-diagonal stripe."""
    ii, jj = _coords(size)
    img = np.zeros((size, size), dtype=np.float64)
    thick = max(2, size // 6)
    hi = rng.uniform(0.7, 1.0)
    if cls == 0:
        pos = rng.integers(1, size - thick - 1)
        img[pos : pos + thick, :] = hi
    elif cls == 1:
        pos = rng.integers(1, size - thick - 1)
        img[:, pos : pos + thick] = hi
    elif cls == 2:
        cy, cx = rng.uniform(size * 0.35, size * 0.65, 2)
        rad = rng.uniform(size * 0.2, size * 0.33)
        img[(ii - cy) ** 2 + (jj - cx) ** 2 <= rad**2] = hi
    elif cls == 3:
        cy, cx = rng.uniform(size * 0.4, size * 0.6, 2)
        rad = rng.uniform(size * 0.25, size * 0.38)
        d2 = (ii - cy) ** 2 + (jj - cx) ** 2
        img[(d2 <= rad**2) & (d2 >= (rad - thick) ** 2)] = hi
    elif cls == 4:
        py = rng.integers(2, size - thick - 2)
        px = rng.integers(2, size - thick - 2)
        img[py : py + thick, :] = hi
        img[:, px : px + thick] = hi
    elif cls == 5:
        cell = max(2, size // 6)
        phase = rng.integers(0, 2)
        img[((ii // cell + jj // cell) % 2) == phase] = hi
    elif cls == 6:
        off = rng.integers(-size // 3, size // 3 + 1)
        img[np.abs(ii - jj - off) <= thick // 2 + 1] = hi
    elif cls == 7:
        off = rng.integers(-size // 3, size // 3 + 1)
        img[np.abs(ii + jj - (size - 1) - off) <= thick // 2 + 1] = hi
    else:
        raise ValueError(f"no renderer for class {cls}")
    return img


def generate_synthetic(seed, n, k=8, size=16, noise=0.5):
    """Render n examples over k shape classes, deterministic from seed.

    Class counts are balanced within 1; example order is a seeded shuffle.
    Pixels are clipped to [0, 1] and quantized to 1/255 steps so that raw
    u8 serialization is lossless.
    """
    if k < 2:
        raise ValueError("need at least two classes")
    if k > 8:
        raise ValueError("at most 8 shape classes are available")
    if n < k:
        raise ValueError("need at least one example per class")
    if size < 8:
        raise ValueError("size must be at least 8")
    rng = np.random.default_rng(seed)
    labels = np.array([i % k for i in range(n)], dtype=np.int64)
    images = np.empty((n, 1, size, size), dtype=DTYPE)
    for i in range(n):
        img = _render(int(labels[i]), size, rng)
        img += rng.normal(0.0, noise, img.shape)
        img = np.clip(img, 0.0, 1.0)
        # quantize through u8 exactly like the raw loader, for bit-exact roundtrips
        images[i, 0] = np.round(img * 255.0).astype(np.uint8).astype(DTYPE) / DTYPE(255.0)
    order = rng.permutation(n)
    return Dataset(images[order], labels[order], class_count=k)


def train_test_split(dataset, train_count):
    """First train_count examples vs the rest; generation order is already
    a seeded shuffle, so the split is disjoint and seed-stable."""
    if not 0 < train_count < len(dataset):
        raise ValueError(f"train_count {train_count} outside (0, {len(dataset)})")
    return dataset.slice(0, train_count), dataset.slice(train_count, len(dataset))


# ---------------------------------------------------------------------------
# raw binary format

DS_MAGIC = b"ILPD-DS"
DS_VERSION = 1


def save_raw(dataset, path):
    """magic, version, (n, channels, height, width, k) as u32, pixel
    payload as u8 (value * 255), labels as u16 LE, trailing CRC-32."""
    n, c, h, w = dataset.images.shape
    out = bytearray()
    out += DS_MAGIC
    out += struct.pack("<6I", DS_VERSION, n, c, h, w, dataset.class_count)
    pixels = np.round(dataset.images * 255.0).astype(np.uint8)
    out += pixels.tobytes()
    out += dataset.labels.astype("<u2").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(bytes(out))


def load_raw(path):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[: len(DS_MAGIC)] != DS_MAGIC:
        raise DatasetBadMagic(f"bad magic {buf[:len(DS_MAGIC)]!r}")
    header_end = len(DS_MAGIC) + 24
    if len(buf) < header_end + 4:
        raise DatasetTruncated("file shorter than its header")
    version, n, c, h, w, k = struct.unpack("<6I", buf[len(DS_MAGIC) : header_end])
    if version != DS_VERSION:
        raise DatasetFileError(f"unsupported dataset version {version}")
    npix = n * c * h * w
    body = buf[header_end:-4]
    if len(body) != npix + 2 * n:
        raise DatasetTruncated(
            f"payload holds {len(body)} bytes, expected {npix + 2 * n}"
        )
    stored = struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != stored:
        raise DatasetChecksumMismatch("CRC-32 mismatch")
    pixels = np.frombuffer(body[:npix], dtype=np.uint8).reshape(n, c, h, w)
    labels = np.frombuffer(body[npix:], dtype="<u2").astype(np.int64)
    bad = np.nonzero(labels >= k)[0]
    if bad.size:
        raise DatasetValidationError(f"label {labels[bad[0]]} >= {k} at record {bad[0]}")
    images = (pixels.astype(DTYPE) / DTYPE(255.0)).astype(DTYPE)
    return Dataset(images, labels, class_count=k)
