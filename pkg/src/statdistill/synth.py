"""Synthesis of the distilled dataset.

The learnable image tensor is optimized with four terms per iteration:
cross-entropy on hard labels through a backbone drawn uniformly from the
pool, EMA-steered channel matching against stored BN statistics, the same
steered matching over conv channel/patch statistics (with per-term random
dropping), and a Gram-spectrum spreading loss that pushes each class's
images toward linear independence.

The steered losses subtract a stop-gradient copy of the gap between the
current batch statistic and its EMA running total, so the descent direction
is set by the accumulated statistics of all past batches while the current
batch supplies the Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .engine import Array, backward, ops, stop_grad
from .engine.eig import eigvals_sym
from .errors import EngineError, NumericError
from .nets import BackbonePool, Model
from .optim import Adam
from .statbank import StatBank

DD_DOWNSAMPLE = 32  # spectra are taken on at-most-32x32 views of the images


@dataclass
class BatchPlan:
    """How synthesis batches are assembled from the distilled set.

    reorder: each batch is `classes_per_batch` blocks of `samples_per_class`
    same-class images (the spectrum loss needs >=2 per class). original:
    images are visited in slot-major order, one image per class per slot.
    """

    mode: str = "reorder"
    classes_per_batch: int = 5
    samples_per_class: int = 10

    def __post_init__(self):
        if self.mode not in ("original", "reorder"):
            raise EngineError(f"batch plan mode must be original|reorder, got {self.mode!r}")
        if self.classes_per_batch < 1 or self.samples_per_class < 1:
            raise EngineError("batch plan sizes must be positive")
        if self.mode == "reorder" and self.samples_per_class < 2:
            raise EngineError("reorder plan needs samples_per_class >= 2")


@dataclass
class SynthesisConfig:
    iterations: int = 4000
    lr: float = 0.05
    adam_betas: tuple = (0.5, 0.9)
    alpha: float = 0.8
    tau_dd: float = 4.0
    beta_dr: float = 0.4
    w_bn: float = 0.01
    w_conv: float = 0.01
    w_dd: float = 1.0
    ipc: int = 10
    init: str = "noise"
    batch_plan: BatchPlan = field(default_factory=BatchPlan)
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.alpha < 1.0):
            raise EngineError(f"alpha must lie in [0,1), got {self.alpha}")
        if not (0.0 <= self.beta_dr <= 1.0):
            raise EngineError(f"beta_dr must lie in [0,1], got {self.beta_dr}")
        if self.tau_dd <= 0:
            raise EngineError(f"tau_dd must be positive, got {self.tau_dd}")


@dataclass
class SyntheticDataset:
    """The learnable distilled images plus per-image class labels."""

    images: Array
    labels: np.ndarray
    ipc: int
    classes: int
    value_range: str = "unit"

    def per_class_indices(self) -> dict:
        return {c: np.nonzero(self.labels == c)[0] for c in range(self.classes)}


def init_synthetic(dataset: Dataset, ipc: int, mode: str = "noise", seed: int = 0) -> SyntheticDataset:
    """noise: standard-normal pixels scaled to the data range; real-init:
    ipc distinct real training images per class."""
    if ipc < 1:
        raise EngineError(f"init_synthetic: ipc must be >= 1, got {ipc}")
    classes = dataset.classes
    shape = dataset.image_shape
    labels = np.repeat(np.arange(classes, dtype=np.int64), ipc)
    rng = np.random.default_rng(seed)
    if mode == "noise":
        # Unit data range: centre 0.5, quarter-range scale.
        images = 0.5 + 0.25 * rng.standard_normal((classes * ipc, *shape))
    elif mode == "real-init":
        images = np.empty((classes * ipc, *shape), dtype=np.float64)
        for c in range(classes):
            avail = np.nonzero(dataset.train_y == c)[0]
            if avail.size < ipc:
                raise EngineError(
                    f"init_synthetic: class {c} has {avail.size} real images, ipc={ipc}")
            pick = rng.choice(avail, size=ipc, replace=False)
            images[c * ipc:(c + 1) * ipc] = dataset.train_x[pick]
    else:
        raise EngineError(f"init_synthetic: unknown mode {mode!r}")
    return SyntheticDataset(Array(images, requires_grad=True), labels, ipc, classes)


# ---------------------------------------------------------------------------
# Loss terms


def gram_spectrum_loss(batch: Array, labels: np.ndarray, tau_dd: float) -> Array:
    """Spread each class's Gram spectrum toward uniformity.

    Per class with >=2 samples: images are average-pooled to at most
    32x32, flattened, and the eigenvalues of X X^T are pushed toward their
    temperature-softened (stop-gradient) distribution under a KL loss.
    Classes with a single sample contribute zero.
    """
    if tau_dd <= 0:
        raise EngineError(f"gram_spectrum_loss: tau_dd must be positive, got {tau_dd}")
    h, w = batch.shape[2], batch.shape[3]
    pooled = batch
    if h > DD_DOWNSAMPLE or w > DD_DOWNSAMPLE:
        pooled = ops.adaptive_avg_pool2d(batch, (min(h, DD_DOWNSAMPLE), min(w, DD_DOWNSAMPLE)))
    total = None
    for c in np.unique(labels):
        idx = np.nonzero(labels == c)[0]
        if idx.size < 2:
            continue
        flat = ops.flatten2d(ops.take_rows(pooled, idx))
        gram = ops.matmul(flat, ops.transpose(flat, (1, 0)))
        if not np.isfinite(gram.data).all():
            raise NumericError(f"gram_spectrum_loss: non-finite Gram entries for class {c}")
        sigma = eigvals_sym(gram)
        target = stop_grad(ops.softmax(ops.div(sigma, tau_dd)))
        kl = ops.sum_(ops.mul(target, ops.sub(ops.log(target), ops.log_softmax(sigma))))
        total = kl if total is None else ops.add(total, kl)
    return total if total is not None else Array(0.0)


class EmaTotals:
    """Per-layer running statistic totals, EMA-updated once per use.

    Slots initialize to the first observed batch statistic, so the first
    contribution is independent of the decay.
    """

    def __init__(self, alpha: float):
        self.alpha = float(alpha)
        self.slots: dict = {}

    def update(self, key, value: np.ndarray) -> np.ndarray:
        if key not in self.slots:
            self.slots[key] = value.copy()
        else:
            self.slots[key] = self.alpha * self.slots[key] + (1.0 - self.alpha) * value
        return self.slots[key]


def _steered_term(stat: Array, target: np.ndarray, total: np.ndarray) -> Array:
    """|| stat - target - stop_grad(stat - total) ||_2.

    Forward value equals ||total - target||; the gradient direction is the
    unit vector of (total - target) applied through stat's Jacobian.
    """
    gap = stop_grad(ops.sub(stat, Array(total)))
    return ops.l2_norm(ops.sub(ops.sub(stat, Array(target)), gap))


def bn_match_loss(bn_taps: list, bank: StatBank, totals: EmaTotals) -> Array:
    """EMA-steered matching of BN batch moments against stored running stats."""
    bank_bn = bank.bn_layers()
    if len(bn_taps) != len(bank_bn):
        raise EngineError(
            f"bn_match_loss: {len(bn_taps)} taps vs {len(bank_bn)} bank layers")
    total = Array(0.0)
    for tap, layer in zip(bn_taps, bank_bn):
        mu_tot = totals.update(("bn_mean", layer.index), tap.batch_mean.data)
        var_tot = totals.update(("bn_var", layer.index), tap.batch_var.data)
        total = ops.add(total, _steered_term(tap.batch_mean, layer.channel_mean, mu_tot))
        total = ops.add(total, _steered_term(tap.batch_var, layer.channel_var, var_tot))
    return total


CONV_FAMILIES = ("cm", "cv", "pm", "pv")


def conv_match_loss(conv_taps: list, bank: StatBank, totals: EmaTotals,
                    beta_dr: float, rng: np.random.Generator) -> Array:
    """EMA-steered matching of conv channel and patch moments.

    Each (layer, family) term is independently dropped with probability
    beta_dr; dropped terms also skip their EMA update.
    """
    bank_conv = bank.conv_layers()
    if len(conv_taps) != len(bank_conv):
        raise EngineError(
            f"conv_match_loss: {len(conv_taps)} taps vs {len(bank_conv)} bank layers")
    total = Array(0.0)
    for tap, layer in zip(conv_taps, bank_conv):
        x = tap.output
        keep = {fam: (beta_dr == 0.0 or rng.random() >= beta_dr) for fam in CONV_FAMILIES}
        stats = {}
        if keep["cm"] or keep["cv"]:
            stats["cm"] = ops.mean(x, axis=(0, 2, 3))
            stats["cv"] = ops.var(x, axis=(0, 2, 3))
        if keep["pm"] or keep["pv"]:
            pm = ops.cell_mean(x, layer.n_p)
            stats["pm"] = pm
            stats["pv"] = ops.sub(ops.cell_mean(ops.mul(x, x), layer.n_p), ops.mul(pm, pm))
        targets = {"cm": layer.channel_mean, "cv": layer.channel_var,
                   "pm": layer.patch_mean, "pv": layer.patch_var}
        for fam in CONV_FAMILIES:
            if not keep[fam]:
                continue
            tot = totals.update((fam, layer.index), stats[fam].data)
            total = ops.add(total, _steered_term(stats[fam], targets[fam], tot))
    return total


# ---------------------------------------------------------------------------
# The iteration loop


class _Planner:
    """Yields index batches per the plan, reshuffling every full cycle."""

    def __init__(self, synthetic: SyntheticDataset, plan: BatchPlan, rng):
        self.synthetic = synthetic
        self.plan = plan
        self.rng = rng
        self.queue: list = []

    def next_batch(self) -> np.ndarray:
        if not self.queue:
            self._build_cycle()
        return self.queue.pop(0)

    def _build_cycle(self) -> None:
        plan, syn = self.plan, self.synthetic
        per_class = syn.per_class_indices()
        if plan.mode == "reorder":
            chunks = []
            class_order = self.rng.permutation(syn.classes)
            for c in class_order:
                idx = per_class[int(c)].copy()
                self.rng.shuffle(idx)
                for s in range(0, idx.size, plan.samples_per_class):
                    chunks.append(idx[s:s + plan.samples_per_class])
            batches = []
            for s in range(0, len(chunks), plan.classes_per_batch):
                batches.append(np.concatenate(chunks[s:s + plan.classes_per_batch]))
            self.queue = batches
        else:
            order = []
            for slot in range(syn.ipc):
                for c in range(syn.classes):
                    order.append(per_class[c][slot])
            order = np.asarray(order)
            size = plan.classes_per_batch * plan.samples_per_class
            self.queue = [order[s:s + size] for s in range(0, order.size, size)]


@dataclass
class SynthState:
    synthetic: SyntheticDataset
    optimizer: Adam
    totals: dict
    planner: _Planner
    drop_rng: np.random.Generator
    step: int = 0
    history: list = field(default_factory=list)


def make_state(synthetic: SyntheticDataset, pool: BackbonePool, config: SynthesisConfig) -> SynthState:
    opt = Adam([synthetic.images], lr=config.lr, betas=config.adam_betas)
    totals = {m.spec.name: EmaTotals(config.alpha) for m in pool}
    plan_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 11]))
    drop_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 13]))
    planner = _Planner(synthetic, config.batch_plan, plan_rng)
    return SynthState(synthetic, opt, totals, planner, drop_rng)


def synth_step(state: SynthState, model: Model, bank: StatBank,
               config: SynthesisConfig) -> dict:
    """One optimizer update of the distilled images through one backbone."""
    syn = state.synthetic
    idx = state.planner.next_batch()
    batch = ops.take_rows(syn.images, idx)
    labels = syn.labels[idx]

    logits, taps = model.forward_with_taps(batch, mode="eval")
    ce = ops.cross_entropy(logits, labels)
    totals = state.totals[model.spec.name]
    bn_taps = [t for t in taps if t.kind == "bn"]
    conv_taps = [t for t in taps if t.kind == "conv"]

    parts = {"ce": ce}
    loss = ce
    if config.w_bn != 0.0 and bn_taps:
        l_bn = bn_match_loss(bn_taps, bank, totals)
        parts["bn"] = l_bn
        loss = ops.add(loss, ops.mul(Array(config.w_bn), l_bn))
    if config.w_conv != 0.0:
        l_conv = conv_match_loss(conv_taps, bank, totals, config.beta_dr, state.drop_rng)
        parts["conv"] = l_conv
        loss = ops.add(loss, ops.mul(Array(config.w_conv), l_conv))
    if config.w_dd != 0.0:
        l_dd = gram_spectrum_loss(batch, labels, config.tau_dd)
        parts["dd"] = l_dd
        loss = ops.add(loss, ops.mul(Array(config.w_dd), l_dd))

    breakdown = {k: v.item() for k, v in parts.items()}
    breakdown["total"] = loss.item()
    breakdown["backbone"] = model.spec.name
    if not np.isfinite(breakdown["total"]):
        raise NumericError(f"synthesis step {state.step}: non-finite loss {breakdown}")

    state.optimizer.zero_grad()
    backward(loss)
    state.optimizer.step()
    if not np.isfinite(syn.images.data).all():
        raise NumericError(f"synthesis step {state.step}: non-finite distilled values")
    state.step += 1
    state.history.append(breakdown)
    return breakdown


def run_synthesis(pool: BackbonePool, banks: dict, config: SynthesisConfig,
                  dataset: Dataset | None = None,
                  synthetic: SyntheticDataset | None = None) -> SyntheticDataset:
    """Full recover phase: per iteration, draw a backbone uniformly (seeded)
    and take one step. Requires one statistics bank per pool member."""
    missing = [name for name in pool.names() if name not in banks]
    if missing:
        raise EngineError(f"run_synthesis: missing statistics banks for {missing}")
    if synthetic is None:
        if dataset is None:
            raise EngineError("run_synthesis: need a dataset or a pre-built synthetic set")
        synthetic = init_synthetic(dataset, config.ipc, config.init,
                                   seed=np.random.SeedSequence([config.seed, 7]))
    pool._rng = np.random.default_rng(np.random.SeedSequence([config.seed, 17]))
    state = make_state(synthetic, pool, config)
    for _ in range(config.iterations):
        model = pool.draw()
        synth_step(state, model, banks[model.spec.name], config)
    return synthetic
