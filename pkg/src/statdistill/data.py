"""Built-in toy datasets and the crop/flip augmentation used everywhere.

Images are float64 [N,C,H,W] in [0,1]; labels are int64. All generators are
pure functions of their seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

TOY_DATASETS = ("blobs-2", "digits-16", "cifar-subset")

# 5x7 digit glyphs, rows top to bottom.
_DIGIT_FONT = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
]


@dataclass
class Dataset:
    name: str
    classes: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.train_x.shape[1:])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.train_x, self.train_y, self.test_x, self.test_y):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def fingerprint(self) -> dict:
        return {
            "name": self.name,
            "train_size": int(self.train_x.shape[0]),
            "test_size": int(self.test_x.shape[0]),
            "classes": int(self.classes),
            "hash": self.content_hash(),
        }


def _balanced_labels(n: int, classes: int, rng) -> np.ndarray:
    reps = [c for c in range(classes) for _ in range(n // classes)]
    reps += list(range(n - len(reps)))
    labels = np.array(reps, dtype=np.int64)
    rng.shuffle(labels)
    return labels


def make_blobs(seed: int, train_size: int = 256, test_size: int = 128,
               shape=(1, 8, 8), noise: float = 0.02) -> Dataset:
    """Two image classes around well-separated template images.

    Templates are low-frequency and left-right symmetric, so the crop/flip
    augmentation stays label-preserving. Template distance exceeds 6x the
    per-pixel noise sigma by a wide margin, so the classes are linearly
    separable by construction.
    """
    rng = np.random.default_rng(seed)
    c, h, w = shape
    coarse = rng.uniform(0.2, 0.8, size=(2, c, max(1, h // 2), max(1, w // 2)))
    templates = coarse.repeat(2, axis=2)[:, :, :h].repeat(2, axis=3)[:, :, :, :w]
    templates = (templates + templates[:, :, :, ::-1]) / 2
    dist = np.linalg.norm((templates[0] - templates[1]).ravel())
    assert dist > 6 * noise, "blob templates drawn too close"

    def draw(n):
        y = _balanced_labels(n, 2, rng)
        x = templates[y] + rng.normal(0.0, noise, size=(n, *shape))
        return np.clip(x, 0.0, 1.0), y

    train_x, train_y = draw(train_size)
    test_x, test_y = draw(test_size)
    return Dataset("blobs-2", 2, train_x, train_y, test_x, test_y,
                   params={"noise": noise, "template_distance": float(dist)})


def make_digits16(seed: int, train_size: int = 1024, test_size: int = 512,
                  noise: float = 0.05) -> Dataset:
    """10-class 16x16 grayscale digits: jittered, noised glyph renderings."""
    rng = np.random.default_rng(seed)
    glyphs = np.array([[[int(ch) for ch in row] for row in g] for g in _DIGIT_FONT],
                      dtype=np.float64)
    big = glyphs.repeat(2, axis=1).repeat(2, axis=2)  # [10, 14, 10]

    def draw(n):
        y = _balanced_labels(n, 10, rng)
        x = np.zeros((n, 1, 16, 16), dtype=np.float64)
        for i, c in enumerate(y):
            dy = int(rng.integers(-1, 2))
            dx = int(rng.integers(-2, 3))
            intensity = rng.uniform(0.7, 1.0)
            x[i, 0, 1 + dy:15 + dy, 3 + dx:13 + dx] = big[c] * intensity
        x += rng.normal(0.0, noise, size=x.shape)
        return np.clip(x, 0.0, 1.0), y

    train_x, train_y = draw(train_size)
    test_x, test_y = draw(test_size)
    return Dataset("digits-16", 10, train_x, train_y, test_x, test_y,
                   params={"noise": noise})


RECORD_BYTES = 3073  # 1 label byte + 3x32x32 pixels


def load_cifar_subset(path: str, seed: int, test_fraction: float = 0.2) -> Dataset:
    """Ingest externally supplied 32x32 RGB binary records, downscaled to 16x16.

    Record layout: one label byte (0..9) followed by 3072 channel-major
    pixel bytes. Malformed input is rejected with the failing byte offset.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % RECORD_BYTES != 0:
        offset = len(raw) - (len(raw) % RECORD_BYTES)
        raise ConfigError(
            f"cifar-subset: truncated or empty record at byte offset {offset} in {path}")
    n = len(raw) // RECORD_BYTES
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(n, RECORD_BYTES)
    labels = buf[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise ConfigError(
            f"cifar-subset: invalid label {labels[bad[0]]} at byte offset {int(bad[0]) * RECORD_BYTES} in {path}")
    images = buf[:, 1:].reshape(n, 3, 32, 32).astype(np.float64) / 255.0
    images = images.reshape(n, 3, 16, 2, 16, 2).mean(axis=(3, 5))

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_test = max(1, int(n * test_fraction))
    test_idx, train_idx = order[:n_test], order[n_test:]
    classes = int(labels.max()) + 1
    return Dataset("cifar-subset", classes,
                   images[train_idx], labels[train_idx],
                   images[test_idx], labels[test_idx],
                   params={"source": str(path), "records": n})


def toy_datasets(name: str, seed: int, **params) -> Dataset:
    if name == "blobs-2":
        return make_blobs(seed, **params)
    if name == "digits-16":
        return make_digits16(seed, **params)
    if name == "cifar-subset":
        if "path" not in params:
            raise ConfigError("cifar-subset requires a 'path' parameter")
        return load_cifar_subset(params.pop("path"), seed, **params)
    raise ConfigError(f"unknown dataset {name!r}; expected one of {TOY_DATASETS}")


# ---------------------------------------------------------------------------
# Augmentation: zero-padded random crop plus horizontal flip.

def view_from_seed(img: np.ndarray, seed: int, pad: int = 2) -> np.ndarray:
    """Deterministic augmented view of one [C,H,W] image."""
    rng = np.random.default_rng(seed)
    dy = int(rng.integers(0, 2 * pad + 1))
    dx = int(rng.integers(0, 2 * pad + 1))
    flip = bool(rng.integers(0, 2))
    return _crop_flip(img, dy, dx, flip, pad)


def augment_batch(batch: np.ndarray, rng, pad: int = 2) -> np.ndarray:
    """Per-image random crop/flip for a [B,C,H,W] batch (training-time)."""
    out = np.empty_like(batch)
    for i in range(batch.shape[0]):
        dy = int(rng.integers(0, 2 * pad + 1))
        dx = int(rng.integers(0, 2 * pad + 1))
        flip = bool(rng.integers(0, 2))
        out[i] = _crop_flip(batch[i], dy, dx, flip, pad)
    return out


def _crop_flip(img: np.ndarray, dy: int, dx: int, flip: bool, pad: int) -> np.ndarray:
    c, h, w = img.shape
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=img.dtype)
    padded[:, pad:pad + h, pad:pad + w] = img
    view = padded[:, dy:dy + h, dx:dx + w]
    if flip:
        view = view[:, :, ::-1]
    return np.ascontiguousarray(view)
