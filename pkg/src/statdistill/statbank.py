"""Global statistics capture: one gradient-free pass over the real dataset
per backbone, recording channel and patch moments of every convolution tap,
plus the BN running statistics populated during pretraining.

Per-batch statistics are averaged arithmetically over batches (each batch
weighted equally), and variances are population variances throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .artifacts import read_blob, read_manifest, write_blob, write_manifest
from .engine import Array, no_grad, ops
from .errors import ArtifactError, EngineError
from .nets import Model

DEFAULT_PATCH_CELL = 4  # cell size for feature maps up to 64 pixels


@dataclass
class LayerStats:
    """Statistics for one tap: channel moments, plus patch moments for convs."""

    index: int
    kind: str  # "bn" | "conv"
    path: str
    channel_mean: np.ndarray
    channel_var: np.ndarray
    patch_mean: np.ndarray | None = None
    patch_var: np.ndarray | None = None
    n_p: int | None = None

    def validate(self) -> None:
        if (self.channel_var < -1e-12).any():
            raise EngineError(f"layer {self.index}: negative channel variance")
        if self.patch_var is not None and (self.patch_var < -1e-12).any():
            raise EngineError(f"layer {self.index}: negative patch variance")


@dataclass
class StatBank:
    """All captured statistics for one backbone over one dataset."""

    backbone: str
    layers: list
    fingerprint: dict
    n_p: int = DEFAULT_PATCH_CELL
    extra: dict = field(default_factory=dict)

    def bn_layers(self) -> list:
        return [l for l in self.layers if l.kind == "bn"]

    def conv_layers(self) -> list:
        return [l for l in self.layers if l.kind == "conv"]


def patch_reduce(feature: np.ndarray, n_p: int):
    """Mean and population variance per n_p x n_p cell, reduced over batch,
    channel, and within-cell pixels. Returns two [ceil(H/n_p), ceil(W/n_p)] maps."""
    if feature.ndim != 4:
        raise EngineError(f"patch_reduce: expected [B,C,H,W], got {feature.shape}")
    b, c, h, w = feature.shape
    if n_p < 1:
        raise EngineError(f"patch_reduce: cell size must be >= 1, got {n_p}")
    if n_p > max(h, w):
        raise EngineError(f"patch_reduce: cell size {n_p} exceeds feature map {h}x{w}")
    gh, gw = -(-h // n_p), -(-w // n_p)
    pm = np.empty((gh, gw), dtype=np.float64)
    pv = np.empty((gh, gw), dtype=np.float64)
    for i in range(gh):
        for j in range(gw):
            cell = feature[:, :, i * n_p:(i + 1) * n_p, j * n_p:(j + 1) * n_p]
            pm[i, j] = cell.mean()
            pv[i, j] = cell.var()
    return pm, pv


def effective_cell(n_p: int, h: int, w: int) -> int:
    """Per-layer patch cell size: the default clamped to the feature map."""
    return min(n_p, max(h, w))


def batch_tap_stats(taps, n_p: int) -> list:
    """Differentiable per-batch statistics for an ordered tap list.

    Returns one dict per tap; conv entries carry channel and patch moments
    (engine Arrays), bn entries the batch mean/variance already on the tap.
    The patch cell size is clamped per layer to its feature map.
    """
    out = []
    for i, tap in enumerate(taps):
        if tap.kind == "bn":
            out.append({"index": i, "kind": "bn", "path": tap.path,
                        "cm": tap.batch_mean, "cv": tap.batch_var})
        else:
            x = tap.output
            cell = effective_cell(n_p, x.shape[2], x.shape[3])
            cm = ops.mean(x, axis=(0, 2, 3))
            cv = ops.var(x, axis=(0, 2, 3))
            pm = ops.cell_mean(x, cell)
            sq = ops.mul(x, x)
            pv = ops.sub(ops.cell_mean(sq, cell), ops.mul(pm, pm))
            out.append({"index": i, "kind": "conv", "path": tap.path,
                        "cm": cm, "cv": cv, "pm": pm, "pv": pv, "n_p": cell})
    return out


def capture_conv_stats(model: Model, dataset, n_p: int = DEFAULT_PATCH_CELL,
                       batch_size: int = 50) -> StatBank:
    """Single eval-mode traversal of the training split; no state is mutated.

    Per-batch conv channel/patch statistics are averaged over batches; BN
    layers contribute the running statistics stored during pretraining.
    """
    x = dataset.train_x
    if x.shape[0] == 0:
        raise EngineError("capture_conv_stats: empty dataset")
    if tuple(x.shape[1:]) != tuple(model.spec.in_shape):
        raise EngineError(
            f"capture_conv_stats: dataset shape {x.shape[1:]} does not match "
            f"model input {model.spec.in_shape}")

    # Incremental batch mean (m += (s - m)/k): equals the arithmetic mean
    # over batches up to rounding and is exact for identical batches.
    means: list[dict] = []
    n_batches = 0
    with no_grad():
        for start in range(0, x.shape[0], batch_size):
            _, taps = model.forward_with_taps(Array(x[start:start + batch_size]), mode="eval")
            stats = batch_tap_stats(taps, n_p)
            n_batches += 1
            if not means:
                means = [{k: (v.data.copy() if isinstance(v, Array) else v)
                          for k, v in s.items()} for s in stats]
            else:
                for acc, s in zip(means, stats):
                    for key in ("cm", "cv", "pm", "pv"):
                        if key in acc:
                            acc[key] += (s[key].data - acc[key]) / n_batches

    layers = []
    for acc in means:
        if acc["kind"] == "bn":
            state = model.bn_state[acc["path"]]
            layers.append(LayerStats(acc["index"], "bn", acc["path"],
                                     state["mean"].copy(), state["var"].copy()))
        else:
            layers.append(LayerStats(acc["index"], "conv", acc["path"],
                                     acc["cm"], acc["cv"], acc["pm"], acc["pv"],
                                     n_p=acc["n_p"]))
    for layer in layers:
        layer.validate()
    return StatBank(model.spec.name, layers, dataset.fingerprint(), n_p=n_p,
                    extra={"batch_size": batch_size, "batches": n_batches})


# ---------------------------------------------------------------------------
# Persistence: manifest + per-layer raw little-endian float blobs.


def save_bank(bank: StatBank, path, storage: str = "f8") -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table = []
    for layer in bank.layers:
        entry = {"index": layer.index, "kind": layer.kind, "path": layer.path,
                 "channels": int(layer.channel_mean.shape[0])}
        blobs = {"cm": layer.channel_mean, "cv": layer.channel_var}
        if layer.kind == "conv":
            entry["grid"] = list(layer.patch_mean.shape)
            entry["n_p"] = layer.n_p
            blobs["pm"] = layer.patch_mean
            blobs["pv"] = layer.patch_var
        hashes = {}
        for key, arr in blobs.items():
            hashes[key] = write_blob(path / f"l{layer.index}.{key}.bin", arr, storage=storage)
        entry["hashes"] = hashes
        table.append(entry)
    write_manifest(path / "manifest", {
        "kind": "statbank",
        "backbone": bank.backbone,
        "fingerprint": bank.fingerprint,
        "n_p": bank.n_p,
        "storage": storage,
        "layers": table,
        "extra": bank.extra,
    })


def load_bank(path, backbone: str | None = None, fingerprint: dict | None = None) -> StatBank:
    """Load a bank directory; `backbone` must match when given, and a
    fingerprint mismatch is surfaced as a warning in the returned extra dict."""
    import warnings

    path = Path(path)
    manifest = read_manifest(path / "manifest")
    if manifest.get("kind") != "statbank":
        raise ArtifactError(f"{path} is not a statistics bank")
    if backbone is not None and manifest["backbone"] != backbone:
        raise ArtifactError(
            f"bank {path} belongs to backbone {manifest['backbone']!r}, requested {backbone!r}")
    storage = manifest.get("storage", "f8")
    layers = []
    for entry in manifest["layers"]:
        ch = entry["channels"]
        hashes = entry["hashes"]
        cm = read_blob(path / f"l{entry['index']}.cm.bin", (ch,), storage, hashes["cm"])
        cv = read_blob(path / f"l{entry['index']}.cv.bin", (ch,), storage, hashes["cv"])
        if entry["kind"] == "conv":
            grid = tuple(entry["grid"])
            pm = read_blob(path / f"l{entry['index']}.pm.bin", grid, storage, hashes["pm"])
            pv = read_blob(path / f"l{entry['index']}.pv.bin", grid, storage, hashes["pv"])
            layers.append(LayerStats(entry["index"], "conv", entry["path"], cm, cv, pm, pv,
                                     n_p=entry["n_p"]))
        else:
            layers.append(LayerStats(entry["index"], "bn", entry["path"], cm, cv))
    bank = StatBank(manifest["backbone"], layers, manifest["fingerprint"],
                    n_p=manifest["n_p"], extra=manifest.get("extra", {}))
    if fingerprint is not None and fingerprint != bank.fingerprint:
        warnings.warn(f"bank {path} was captured on a different dataset "
                      f"(fingerprint mismatch)", stacklevel=2)
        bank.extra["fingerprint_mismatch"] = True
    return bank
