"""Evaluation phase: train a fresh model on the distilled set against stored
ensemble logits (squared error plus gamma-weighted hard-label term), then
measure top-1 accuracy on the held-out real test split.

Also hosts the diversity diagnostics (intra-class cosine similarity and
per-class Gram spectra) used to compare synthesis settings.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .artifacts import write_manifest
from .data import Dataset, view_from_seed
from .engine import Array, backward, no_grad, ops
from .engine.eig import jacobi_eigh
from .errors import ArtifactError, EngineError, NumericError
from .nets import BackboneSpec, build_backbone
from .optim import build_optimizer
from .pretrain import evaluate_accuracy
from .relabel import SoftLabelStore
from .synth import DD_DOWNSAMPLE, SyntheticDataset


def kd_mse_loss(student: Array, teacher: np.ndarray, onehot: np.ndarray,
                gamma: float) -> Array:
    """Batch-mean of ||student - teacher||^2 - gamma * y.log_softmax(student)."""
    if gamma < 0:
        raise EngineError(f"kd_mse_loss: gamma must be >= 0, got {gamma}")
    teacher = np.asarray(teacher, dtype=np.float64)
    onehot = np.asarray(onehot, dtype=np.float64)
    if student.shape != teacher.shape or student.shape != onehot.shape:
        raise EngineError(
            f"kd_mse_loss: shape mismatch student={student.shape} "
            f"teacher={teacher.shape} onehot={onehot.shape}")
    if not np.isfinite(student.data).all():
        raise NumericError("kd_mse_loss: non-finite student logits")
    n = student.shape[0]
    se = ops.sq_err(student, Array(teacher))
    gt = ops.sum_(ops.mul(Array(onehot), ops.log_softmax(student, axis=1)))
    return ops.div(ops.sub(se, ops.mul(Array(float(gamma)), gt)), float(n))


@dataclass
class EvalConfig:
    epochs: int = 100
    optimizer: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    adam_betas: tuple = (0.9, 0.999)
    gamma: float = 0.1
    batch_size: int = 64
    full_batch_threshold: int = 100  # train full-batch when the set is this small


@dataclass
class EvalReport:
    model: str
    accuracy: float
    loss_curve: list
    config: dict
    seed: int
    extra: dict = field(default_factory=dict)


def train_eval_model(spec: BackboneSpec, synthetic: SyntheticDataset,
                     store: SoftLabelStore, dataset: Dataset,
                     config: EvalConfig | None = None, seed: int = 0) -> EvalReport:
    """Train a fresh model on the distilled images with replayed views.

    Epoch e uses each image's e-th stored record: the view is rebuilt from
    the recorded augmentation seed, so student inputs match the views the
    ensemble labels were computed on exactly.
    """
    config = config or EvalConfig()
    images = synthetic.images.data
    labels = synthetic.labels
    n = images.shape[0]
    if n == 0:
        raise EngineError("train_eval_model: empty distilled set")
    grouped = store.per_image()
    for i in range(n):
        have = len(grouped.get(i, ()))
        if have < config.epochs:
            raise ArtifactError(
                f"soft label store covers {have} epochs for image {i}, "
                f"need {config.epochs}")

    model = build_backbone(spec, seed=seed)
    opt = build_optimizer(config.optimizer, model.parameters(), lr=config.lr,
                          momentum=config.momentum, betas=config.adam_betas)
    onehot_all = np.zeros((n, store.classes), dtype=np.float64)
    onehot_all[np.arange(n), labels] = 1.0
    rng = np.random.default_rng(seed)
    batch = n if n <= config.full_batch_threshold else config.batch_size

    curve = []
    for epoch in range(config.epochs):
        views = np.empty_like(images)
        teachers = np.empty((n, store.classes), dtype=np.float64)
        for i in range(n):
            aug_seed, z = store.record_for(i, epoch)
            views[i] = view_from_seed(images[i], aug_seed)
            teachers[i] = z
        order = rng.permutation(n)
        total = 0.0
        steps = 0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            logits = model.forward(Array(views[idx]), mode="train")
            loss = kd_mse_loss(logits, teachers[idx], onehot_all[idx], config.gamma)
            if not np.isfinite(loss.item()):
                raise NumericError(f"evaluation training diverged at epoch {epoch}")
            opt.zero_grad()
            backward(loss)
            opt.step()
            total += loss.item()
            steps += 1
        curve.append(total / steps)

    accuracy = evaluate_accuracy(model, dataset.test_x, dataset.test_y)
    return EvalReport(spec.name, accuracy, curve, asdict(config), seed)


def diversity_metric(synthetic: SyntheticDataset) -> dict:
    """Per-class mean pairwise cosine similarity (flattened images) and the
    smallest Gram eigenvalue of the spectra the spreading loss acts on."""
    images = synthetic.images.data
    labels = synthetic.labels
    h, w = images.shape[2], images.shape[3]
    pooled = images
    if h > DD_DOWNSAMPLE or w > DD_DOWNSAMPLE:
        with no_grad():
            pooled = ops.adaptive_avg_pool2d(
                Array(images), (min(h, DD_DOWNSAMPLE), min(w, DD_DOWNSAMPLE))).data
    per_class_cos = {}
    per_class_min_eig = {}
    for c in np.unique(labels):
        idx = np.nonzero(labels == c)[0]
        if idx.size < 2:
            continue
        flat = images[idx].reshape(idx.size, -1)
        norms = np.linalg.norm(flat, axis=1)
        unit = flat / np.where(norms > 0, norms, 1.0)[:, None]
        sims = unit @ unit.T
        iu = np.triu_indices(idx.size, k=1)
        per_class_cos[int(c)] = float(sims[iu].mean())
        gflat = pooled[idx].reshape(idx.size, -1)
        evals, _ = jacobi_eigh(gflat @ gflat.T)
        per_class_min_eig[int(c)] = float(evals[0])
    if not per_class_cos:
        raise EngineError("diversity_metric: every class is a singleton")
    return {
        "per_class_cosine": per_class_cos,
        "per_class_min_eig": per_class_min_eig,
        "mean_cosine": float(np.mean(list(per_class_cos.values()))),
        "mean_min_eig": float(np.mean(list(per_class_min_eig.values()))),
    }


def save_report(report: EvalReport, path) -> None:
    """Plain-text report plus a CSV loss curve alongside it."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_manifest(path / f"report-{report.model}-seed{report.seed}.json", {
        "kind": "eval-report",
        "model": report.model,
        "accuracy": report.accuracy,
        "seed": report.seed,
        "config": report.config,
        "extra": report.extra,
    })
    curve_path = path / f"loss-{report.model}-seed{report.seed}.csv"
    with open(curve_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for i, v in enumerate(report.loss_curve):
            writer.writerow([i, f"{v:.10g}"])
