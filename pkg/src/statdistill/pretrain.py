"""Backbone pretraining on real data (cross-entropy + momentum SGD).

This is the phase that populates BN running statistics, which later serve
as the channel-level matching targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, augment_batch
from .engine import Array, backward, no_grad, ops
from .errors import NumericError
from .nets import Model
from .optim import SGD


@dataclass
class PretrainConfig:
    epochs: int = 5
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 32
    augment: bool = True
    crop_pad: int = 2


def pretrain(model: Model, dataset: Dataset, epochs: int | None = None,
             config: PretrainConfig | None = None, seed: int = 0):
    """Train `model` on the real training split; returns (model, train_accuracy).

    Aborts with NumericError if the loss goes non-finite.
    """
    config = config or PretrainConfig()
    epochs = config.epochs if epochs is None else epochs
    if epochs < 1:
        raise ValueError(f"pretrain: epochs must be >= 1, got {epochs}")
    x, y = dataset.train_x, dataset.train_y
    if x.shape[0] == 0:
        raise ValueError("pretrain: empty dataset")

    rng = np.random.default_rng(seed)
    opt = SGD(model.parameters(), lr=config.lr, momentum=config.momentum)
    n = x.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = x[idx]
            if config.augment:
                batch = augment_batch(batch, rng, pad=config.crop_pad)
            logits = model.forward(Array(batch), mode="train")
            loss = ops.cross_entropy(logits, y[idx])
            if not np.isfinite(loss.item()):
                raise NumericError(
                    f"pretrain diverged: non-finite loss at epoch {epoch}, step {start // config.batch_size}")
            opt.zero_grad()
            backward(loss)
            opt.step()
    model.trained_epochs += epochs
    return model, evaluate_accuracy(model, x, y)


def evaluate_accuracy(model: Model, x: np.ndarray, y: np.ndarray,
                      batch_size: int = 256) -> float:
    """Eval-mode top-1 accuracy over (x, y)."""
    hits = 0
    with no_grad():
        for start in range(0, x.shape[0], batch_size):
            logits = model.forward(Array(x[start:start + batch_size]), mode="eval")
            hits += int((logits.data.argmax(axis=1) == y[start:start + batch_size]).sum())
    return hits / x.shape[0]
