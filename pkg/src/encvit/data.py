"""Datasets: the synthetic shape/hue stand-in for CIFAR-10 and the DSET container."""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, RejectedInput

DSET_MAGIC = b"DSET"
DSET_VERSION = 1

SHAPES = ("disk", "ring")
HUES = (0.0, 0.07, 0.14, 0.21, 0.28)  # fraction of the colour wheel
NUM_CLASSES = len(SHAPES) * len(HUES)
ALPHA = (0.6, 0.9)


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) float32 in [0, 1], multiples of 1/255
    labels: np.ndarray  # (n,) int64
    split: str = "train"
    provenance: str = ""
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] == 0:
            raise RejectedInput(f"dataset needs a non-empty (n, C, H, W) image array, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise RejectedInput("one label per image required")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise RejectedInput(f"labels must lie in [0, {self.num_classes})")
        if self.images.min() < 0 or self.images.max() > 1:
            raise RejectedInput("pixel values must lie in [0, 1]")

    def __len__(self):
        return self.images.shape[0]

    @property
    def geometry(self) -> tuple:
        return self.images.shape[1:]

    def take(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.split, self.provenance, self.num_classes)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.round(self.images * 255).astype(np.uint8).tobytes())
        h.update(self.labels.astype("<u2").tobytes())
        return h.hexdigest()


def _hsv_to_rgb(h, s, v):
    """Vectorised HSV -> RGB for arrays of equal shape; returns (..., 3)."""
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    table = np.stack([
        np.stack([v, t, p], -1), np.stack([q, v, p], -1), np.stack([p, v, t], -1),
        np.stack([p, q, v], -1), np.stack([t, p, v], -1), np.stack([v, p, q], -1),
    ], 0)
    return np.take_along_axis(table, i[None, ..., None], 0)[0]


def _render(labels: np.ndarray, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    n = labels.size
    shape_id = labels % len(SHAPES)
    hue_id = labels // len(SHAPES)

    # cluttered background: smooth two-colour gradient plus per-pixel texture
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    c0 = rng.uniform(0.15, 0.85, (n, 1)) + rng.uniform(-0.12, 0.12, (n, 3))
    c1 = rng.uniform(0.15, 0.85, (n, 1)) + rng.uniform(-0.12, 0.12, (n, 3))
    theta = rng.uniform(0, 2 * np.pi, n)
    ramp = (np.cos(theta)[:, None, None] * (xx - 0.5) + np.sin(theta)[:, None, None] * (yy - 0.5)) + 0.5
    ramp = np.clip(ramp, 0, 1)[..., None]
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp

    # foreground object
    cy = rng.uniform(10, size - 10, n)
    cx = rng.uniform(10, size - 10, n)
    r = rng.uniform(5.0, 8.5, n)
    dy = np.arange(size)[None, :, None] - cy[:, None, None]
    dx = np.arange(size)[None, None, :] - cx[:, None, None]
    disk = dy**2 + dx**2 <= r[:, None, None] ** 2
    ring = disk & (dy**2 + dx**2 >= (r[:, None, None] - 2.0) ** 2)
    mask = np.where((shape_id == 0)[:, None, None], disk, ring)

    hue = (np.asarray(HUES)[hue_id] + rng.normal(0, 0.01, n)) % 1.0
    sat = rng.uniform(0.55, 1.0, n)
    val = rng.uniform(0.55, 1.0, n)
    fg = _hsv_to_rgb(hue, sat, val)  # (n, 3)
    # translucent object: low contrast against the background
    alpha = rng.uniform(ALPHA[0], ALPHA[1], n)[:, None, None, None]
    img = np.where(mask[..., None], (1 - alpha) * img + alpha * fg[:, None, None, :], img)

    img += rng.normal(0, 0.02, img.shape)
    img = np.clip(img, 0, 1)
    pix = np.round(img * 255).astype(np.uint8).transpose(0, 3, 1, 2)
    return pix.astype(np.float32) / np.float32(255)


def gen_synthetic_dataset(seed: int, n_train: int = 5000, n_test: int = 1000):
    """Balanced 10-class set of 32x32 RGB images; class = (hue, shape).

    Returns ``(train, test)``. Labels cycle 0..9 and are then shuffled, so
    the class histogram is exactly balanced whenever n is divisible by 10.
    """
    if n_train < 1 or n_test < 1:
        raise RejectedInput("n_train and n_test must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    out = []
    for split, n in (("train", n_train), ("test", n_test)):
        labels = rng.permutation(np.arange(n) % NUM_CLASSES)
        images = _render(labels, rng)
        out.append(Dataset(images, labels, split, f"synthetic:seed={seed}:n_train={n_train}:n_test={n_test}"))
    return tuple(out)


def mean_colour_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    """Nearest-centroid classifier on each image's mean colour of its most saturated pixels."""

    def feat(ds):
        x = ds.images.reshape(len(ds), 3, -1)
        spread = x.max(1) - x.min(1)
        k = x.shape[-1] // 8
        idx = np.argsort(-spread, axis=1)[:, :k]
        return np.take_along_axis(x, idx[:, None, :], 2).mean(-1)

    ftr, fte = feat(train), feat(test)
    cent = np.stack([ftr[train.labels == c].mean(0) for c in range(train.num_classes)])
    pred = ((fte[:, None, :] - cent[None]) ** 2).sum(-1).argmin(1)
    return float((pred == test.labels).mean())


def save_dataset(ds: Dataset) -> bytes:
    n, C, H, W = ds.images.shape
    buf = io.BytesIO()
    buf.write(DSET_MAGIC)
    buf.write(struct.pack("<H", DSET_VERSION))
    buf.write(struct.pack("<IIIIH", n, C, H, W, ds.num_classes))
    for text in (ds.split, ds.provenance):
        b = text.encode()
        buf.write(struct.pack("<H", len(b)))
        buf.write(b)
    buf.write(np.round(ds.images * 255).astype(np.uint8).tobytes())
    buf.write(ds.labels.astype("<u2").tobytes())
    return buf.getvalue()


def load_dataset(data: bytes) -> Dataset:
    view = memoryview(data)
    pos = 0

    def take(k):
        nonlocal pos
        if pos + k > len(view):
            raise FormatError("dataset file truncated")
        out = view[pos:pos + k]
        pos += k
        return out

    if bytes(take(4)) != DSET_MAGIC:
        raise FormatError("not a DSET file (bad magic)")
    (version,) = struct.unpack("<H", take(2))
    if version != DSET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    n, C, H, W, k = struct.unpack("<IIIIH", take(18))
    texts = []
    for _ in range(2):
        (ln,) = struct.unpack("<H", take(2))
        texts.append(bytes(take(ln)).decode())
    pix = np.frombuffer(take(n * C * H * W), dtype=np.uint8).reshape(n, C, H, W)
    labels = np.frombuffer(take(2 * n), dtype="<u2").astype(np.int64)
    if pos != len(view):
        raise FormatError("trailing bytes after dataset payload")
    return Dataset(pix.astype(np.float32) / np.float32(255), labels, texts[0], texts[1], k)
