"""On-disk artifact helpers: manifests, raw float blobs, content hashes.

Every stage directory is a JSON manifest plus little-endian float blobs;
manifests carry per-blob hashes so downstream stages can validate cheaply
and corruption is reported with the offending file named.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import ArtifactError

BLOB_DTYPES = {"f8": "<f8", "f4": "<f4"}


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_manifest(path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing manifest {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"corrupt manifest {path}: {exc}") from exc


def write_blob(path, arr: np.ndarray, storage: str = "f8") -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(arr).astype(BLOB_DTYPES[storage]).tobytes()
    path.write_bytes(data)
    return sha256_bytes(data)


def read_blob(path, shape, storage: str = "f8", expected_hash: str | None = None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing blob {path}")
    data = path.read_bytes()
    dtype = np.dtype(BLOB_DTYPES[storage])
    expected_len = int(np.prod(shape)) * dtype.itemsize
    if len(data) != expected_len:
        raise ArtifactError(
            f"blob {path} has {len(data)} bytes, expected {expected_len} (truncated or corrupt)")
    if expected_hash is not None and sha256_bytes(data) != expected_hash:
        raise ArtifactError(f"blob {path} content hash mismatch")
    return np.frombuffer(data, dtype=dtype).reshape(shape).astype(np.float64)


def dir_content_hash(root) -> str:
    """Order-independent hash of every file under a directory tree."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Distilled dataset directory


def save_distilled(path, images: np.ndarray, labels: np.ndarray, ipc: int,
                   classes: int, value_range: str = "unit", extra: dict | None = None,
                   previews: bool = False) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    img_hash = write_blob(path / "images.bin", images)
    lab_hash = write_blob(path / "labels.bin", labels.astype(np.float64))
    manifest = {
        "kind": "distilled",
        "ipc": int(ipc),
        "classes": int(classes),
        "shape": list(images.shape),
        "value_range": value_range,
        "images_hash": img_hash,
        "labels_hash": lab_hash,
    }
    if extra:
        manifest.update(extra)
    write_manifest(path / "manifest", manifest)
    if previews:
        _write_previews(path / "previews", images, labels.astype(int), classes)


def load_distilled(path):
    path = Path(path)
    manifest = read_manifest(path / "manifest")
    if manifest.get("kind") != "distilled":
        raise ArtifactError(f"{path} is not a distilled dataset directory")
    shape = tuple(manifest["shape"])
    images = read_blob(path / "images.bin", shape, expected_hash=manifest["images_hash"])
    labels = read_blob(path / "labels.bin", (shape[0],),
                       expected_hash=manifest["labels_hash"]).astype(np.int64)
    return images, labels, manifest


def _write_previews(path: Path, images: np.ndarray, labels: np.ndarray, classes: int) -> None:
    from PIL import Image

    path.mkdir(parents=True, exist_ok=True)
    for c in range(classes):
        idx = np.nonzero(labels == c)[0]
        if idx.size == 0:
            continue
        tiles = images[idx]
        lo, hi = tiles.min(), tiles.max()
        scale = 255.0 / (hi - lo) if hi > lo else 1.0
        row = np.concatenate([tiles[i] for i in range(tiles.shape[0])], axis=2)
        row = np.clip((row - lo) * scale, 0, 255).astype(np.uint8)
        if row.shape[0] == 1:
            img = Image.fromarray(row[0], mode="L")
        else:
            img = Image.fromarray(row.transpose(1, 2, 0), mode="RGB")
        img.save(path / f"class_{c}.png")
