"""Soft-label generation: ensemble logits over the backbone pool, recorded
per (image, augmentation seed) so the evaluation phase can replay the exact
views the labels were computed on.

With logit normalization enabled, each member's logits are rescaled to the
pool's mean Frobenius norm before averaging, so every member contributes at
equal magnitude.
"""

from __future__ import annotations

import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import view_from_seed
from .engine import Array, no_grad
from .errors import ArtifactError, EngineError
from .nets import BackbonePool
from .synth import SyntheticDataset

_HEADER = struct.Struct("<4sIIIBxxxdII")  # magic, images, classes, epochs, ln, tau, records, crc
_RECORD_HEAD = struct.Struct("<IQ")  # image index, augmentation seed
MAGIC = b"SLB1"


def ensemble_logits(x: Array, pool: BackbonePool, use_ln: bool,
                    per_image: bool = False) -> np.ndarray:
    """Mean pool logits for a batch; optionally norm-equalized per member.

    Normalization uses the batch-level Frobenius norm by default; per_image
    rescales each image's logit vector independently. Members with zero norm
    are excluded with a warning.
    """
    if len(pool) == 0:
        raise EngineError("ensemble_logits: empty pool")
    with no_grad():
        member_logits = [m.forward(x, mode="eval").data for m in pool]
    if not use_ln:
        return np.mean(member_logits, axis=0)

    if per_image:
        norms = np.stack([np.linalg.norm(z, axis=1) for z in member_logits])  # [M,B]
        live = norms > 0.0
        if not live.all():
            warnings.warn("ensemble_logits: zero-norm member logits excluded", stacklevel=2)
        mean_norm = np.where(live.any(axis=0), norms.sum(axis=0) / np.maximum(live.sum(axis=0), 1), 1.0)
        scaled = [np.where(live[i][:, None], z * (mean_norm / np.where(norms[i] > 0, norms[i], 1.0))[:, None], 0.0)
                  for i, z in enumerate(member_logits)]
        counts = np.maximum(live.sum(axis=0), 1)[:, None]
        return np.sum(scaled, axis=0) / counts

    norms = np.array([np.linalg.norm(z) for z in member_logits])
    live = norms > 0.0
    if not live.all():
        warnings.warn("ensemble_logits: zero-norm member logits excluded", stacklevel=2)
    if not live.any():
        raise EngineError("ensemble_logits: all members produced zero logits")
    mean_norm = norms[live].mean()
    scaled = [z * (mean_norm / n) for z, n, ok in zip(member_logits, norms, live) if ok]
    return np.mean(scaled, axis=0)


def derive_view_seed(root_seed: int, epoch: int, image_index: int) -> int:
    """Stable 63-bit augmentation seed for one (epoch, image) slot."""
    x = (root_seed * 0x9E3779B97F4A7C15 + epoch * 0xBF58476D1CE4E5B9 +
         image_index * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return (x ^ (x >> 31)) & 0x7FFFFFFFFFFFFFFF


@dataclass
class SoftLabelStore:
    """Ensemble logit records keyed by (image index, augmentation seed)."""

    classes: int
    image_count: int
    epochs: int
    use_ln: bool
    tau: float
    records: dict = field(default_factory=dict)  # (image, seed) -> logits [K]

    def add(self, image_index: int, aug_seed: int, logits: np.ndarray) -> None:
        if not np.isfinite(logits).all():
            raise EngineError(f"soft label for image {image_index} is non-finite")
        self.records[(int(image_index), int(aug_seed))] = np.asarray(logits, dtype=np.float64)

    def sorted_keys(self) -> list:
        return sorted(self.records.keys())

    def per_image(self) -> dict:
        """Record keys grouped by image, each list sorted by key."""
        grouped: dict[int, list] = {}
        for key in self.sorted_keys():
            grouped.setdefault(key[0], []).append(key)
        return grouped

    def record_for(self, image_index: int, slot: int):
        """The slot-th recorded (seed, logits) pair for an image."""
        grouped = self.per_image()
        if image_index not in grouped or slot >= len(grouped[image_index]):
            raise ArtifactError(
                f"soft label store has no record for image {image_index}, epoch slot {slot}")
        key = grouped[image_index][slot]
        return key[1], self.records[key]

    def probabilities(self, image_index: int, slot: int, tau: float | None = None) -> np.ndarray:
        """Softmax view of one record's logits at temperature tau."""
        tau = self.tau if tau is None else tau
        if tau <= 0:
            raise EngineError(f"temperature must be positive, got {tau}")
        _, z = self.record_for(image_index, slot)
        e = np.exp(z / tau - np.max(z / tau))
        return e / e.sum()


def relabel_dataset(synthetic: SyntheticDataset, pool: BackbonePool, epochs: int,
                    seed: int, use_ln: bool = True, tau: float = 4.0,
                    augment: bool = True, batch_size: int = 128) -> SoftLabelStore:
    """Compute ensemble logits for every (image, epoch) augmented view.

    With augment=False a single identity view per image is recorded under
    seed 0 per epoch slot 0 semantics (epochs is forced to 1).
    """
    classes = {m.spec.classes for m in pool}
    if len(classes) != 1:
        raise EngineError("relabel_dataset: pool members disagree on class count")
    images = synthetic.images.data
    n = images.shape[0]
    if not augment:
        epochs = 1
    store = SoftLabelStore(classes.pop(), n, epochs, use_ln, tau)
    for epoch in range(epochs):
        views = np.empty_like(images)
        seeds = np.empty(n, dtype=np.int64)
        for i in range(n):
            if augment:
                s = derive_view_seed(seed, epoch, i)
                views[i] = view_from_seed(images[i], s)
            else:
                s = derive_view_seed(seed, epoch, i)
                views[i] = images[i]
            seeds[i] = s
        for start in range(0, n, batch_size):
            z = ensemble_logits(Array(views[start:start + batch_size]), pool, use_ln)
            for j in range(z.shape[0]):
                store.add(start + j, seeds[start + j], z[j])
    return store


# ---------------------------------------------------------------------------
# Persistence: fixed-stride binary records behind a checksummed header.


def save_store(store: SoftLabelStore, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = store.sorted_keys()
    body = bytearray()
    for key in keys:
        body += _RECORD_HEAD.pack(key[0], key[1])
        body += store.records[key].astype("<f8").tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    header = _HEADER.pack(MAGIC, store.image_count, store.classes, store.epochs,
                          1 if store.use_ln else 0, store.tau, len(keys), crc)
    path.write_bytes(header + bytes(body))


def load_store(path) -> SoftLabelStore:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing soft label store {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ArtifactError(f"soft label store {path} too short for its header")
    magic, image_count, classes, epochs, ln_flag, tau, n_records, crc = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ArtifactError(f"soft label store {path} has wrong magic {magic!r}")
    stride = _RECORD_HEAD.size + classes * 8
    body = raw[_HEADER.size:]
    if len(body) != n_records * stride:
        raise ArtifactError(
            f"soft label store {path} truncated: {len(body)} body bytes, "
            f"expected {n_records * stride}")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ArtifactError(f"soft label store {path} failed its checksum")
    store = SoftLabelStore(classes, image_count, epochs, bool(ln_flag), tau)
    for r in range(n_records):
        at = r * stride
        img, aseed = _RECORD_HEAD.unpack_from(body, at)
        z = np.frombuffer(body, dtype="<f8", count=classes, offset=at + _RECORD_HEAD.size)
        store.records[(img, aseed)] = z.astype(np.float64)
    return store
