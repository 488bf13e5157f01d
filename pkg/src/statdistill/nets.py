"""Miniature convolutional backbones with per-layer taps.

A backbone is a BackboneSpec (an ordered layer plan) plus a parameter set.
Every convolution output carries a stable tap index; batch-norm layers
additionally expose the batch mean/variance of their input so matching
losses can read them differentiably. Four families keep the architectural
axes distinct at desk scale: a plain residual net (BN), a norm-group convnet
with no BN at all, a depthwise-separable net (BN), and a channel-shuffle net
(BN).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .artifacts import read_blob, read_manifest, write_blob, write_manifest
from .engine import Array, ops
from .errors import ArtifactError, EngineError

GN_GROUPS_DEFAULT = 8


def _gn_groups(channels: int) -> int:
    return GN_GROUPS_DEFAULT if channels >= GN_GROUPS_DEFAULT else 1


def conv(cin, cout, k=3, stride=1, pad=1, groups=1, bias=False):
    return {"kind": "conv", "cin": cin, "cout": cout, "k": k, "stride": stride,
            "pad": pad, "groups": groups, "bias": bias}


def bn(ch):
    return {"kind": "bn", "ch": ch}


def gn(ch):
    return {"kind": "gn", "ch": ch, "groups": _gn_groups(ch)}


def relu():
    return {"kind": "relu"}


def avgpool(k=2):
    return {"kind": "avgpool", "k": k}


def gap():
    return {"kind": "gap"}


def flatten():
    return {"kind": "flatten"}


def linear(din, dout):
    return {"kind": "linear", "din": din, "dout": dout, "bias": True}


def shuffle(groups=2):
    return {"kind": "shuffle", "groups": groups}


def residual(body, proj=None):
    return {"kind": "residual", "body": body, "proj": proj}


@dataclass
class BackboneSpec:
    """Name, ordered layer plan, and shape contract of one backbone."""

    name: str
    plan: list
    in_shape: tuple
    classes: int

    def norm_kinds(self) -> list:
        kinds = []

        def walk(plan):
            for layer in plan:
                if layer["kind"] in ("bn", "gn"):
                    kinds.append(layer["kind"])
                elif layer["kind"] == "residual":
                    walk(layer["body"])
                    if layer["proj"]:
                        walk(layer["proj"])

        walk(self.plan)
        return kinds

    def tap_layout(self) -> list:
        """(kind, path) for every conv and bn tap, in traversal order."""
        layout = []

        def walk(plan, prefix):
            for i, layer in enumerate(plan):
                path = f"{prefix}{i}"
                if layer["kind"] == "conv":
                    layout.append(("conv", path))
                elif layer["kind"] == "bn":
                    layout.append(("bn", path))
                elif layer["kind"] == "residual":
                    walk(layer["body"], path + ".body.")
                    if layer["proj"]:
                        walk(layer["proj"], path + ".proj.")

        walk(self.plan, "")
        return layout

    def conv_tap_count(self) -> int:
        return sum(1 for kind, _ in self.tap_layout() if kind == "conv")

    def bn_tap_count(self) -> int:
        return sum(1 for kind, _ in self.tap_layout() if kind == "bn")


@dataclass
class Tap:
    """One recorded tap: a raw conv output, or a bn layer's batch moments."""

    kind: str
    path: str
    output: Array | None = None
    batch_mean: Array | None = None
    batch_var: Array | None = None


class Model:
    """A built backbone: spec, learnable parameters, and BN running buffers."""

    def __init__(self, spec: BackboneSpec):
        self.spec = spec
        self.params: dict[str, Array] = {}
        self.bn_state: dict[str, dict] = {}
        self.bn_momentum = 0.1
        self.trained_epochs = 0

    def parameters(self) -> list:
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        for path in sorted(self.bn_state):
            h.update(path.encode())
            h.update(self.bn_state[path]["mean"].tobytes())
            h.update(self.bn_state[path]["var"].tobytes())
        return h.hexdigest()

    # -- forward ------------------------------------------------------------

    def forward(self, x: Array, mode: str = "eval") -> Array:
        logits, _ = self._run(x, mode=mode, collect=False)
        return logits

    def forward_with_taps(self, x: Array, mode: str = "eval"):
        """Logits plus ordered taps; bn taps report batch stats of the bn input.

        BN normalization itself follows `mode` ("train" uses batch statistics
        and updates the running buffers; "eval" uses the stored buffers).
        """
        return self._run(x, mode=mode, collect=True)

    def _run(self, x: Array, mode: str, collect: bool):
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.spec.in_shape):
            raise EngineError(
                f"{self.spec.name}: input {x.shape} does not match {self.spec.in_shape}")
        taps: list[Tap] = []
        out = self._run_plan(self.spec.plan, "", x, mode, taps if collect else None)
        return out, taps

    def _run_plan(self, plan, prefix, x, mode, taps):
        for i, layer in enumerate(plan):
            path = f"{prefix}{i}"
            kind = layer["kind"]
            if kind == "conv":
                x = ops.conv2d(x, self.params[f"{path}.weight"], stride=layer["stride"],
                               padding=layer["pad"], groups=layer["groups"])
                if layer.get("bias"):
                    x = ops.add(x, ops.reshape(self.params[f"{path}.bias"],
                                               (1, layer["cout"], 1, 1)))
                if taps is not None:
                    taps.append(Tap("conv", path, output=x))
            elif kind == "bn":
                if taps is not None:
                    taps.append(Tap("bn", path,
                                    batch_mean=ops.mean(x, axis=(0, 2, 3)),
                                    batch_var=ops.var(x, axis=(0, 2, 3))))
                state = self.bn_state[path]
                x = ops.batch_norm(x, self.params[f"{path}.gamma"], self.params[f"{path}.beta"],
                                   state["mean"], state["var"],
                                   training=(mode == "train"), momentum=self.bn_momentum)
            elif kind == "gn":
                x = ops.group_norm(x, self.params[f"{path}.gamma"], self.params[f"{path}.beta"],
                                   groups=layer["groups"])
            elif kind == "relu":
                x = ops.relu(x)
            elif kind == "avgpool":
                x = ops.avg_pool2d(x, layer["k"])
            elif kind == "gap":
                x = ops.mean(x, axis=(2, 3))
            elif kind == "flatten":
                x = ops.flatten2d(x)
            elif kind == "linear":
                x = ops.add(ops.matmul(x, self.params[f"{path}.weight"]),
                            self.params[f"{path}.bias"])
            elif kind == "shuffle":
                x = ops.channel_shuffle(x, layer["groups"])
            elif kind == "residual":
                body = self._run_plan(layer["body"], path + ".body.", x, mode, taps)
                skip = x if layer["proj"] is None else \
                    self._run_plan(layer["proj"], path + ".proj.", x, mode, taps)
                x = ops.add(body, skip)
            else:
                raise EngineError(f"unknown layer kind {kind!r} at {path}")
        return x


def build_backbone(spec: BackboneSpec, seed: int) -> Model:
    """Deterministic initialization: He-uniform fan-in for conv/linear weights,
    ones/zeros for norm scale/shift, zeros/ones for BN running buffers."""
    model = Model(spec)
    rng = np.random.default_rng(seed)

    def init_plan(plan, prefix):
        for i, layer in enumerate(plan):
            path = f"{prefix}{i}"
            kind = layer["kind"]
            if kind == "conv":
                cig = layer["cin"] // layer["groups"]
                fan_in = cig * layer["k"] * layer["k"]
                bound = np.sqrt(6.0 / fan_in)
                w = rng.uniform(-bound, bound, size=(layer["cout"], cig, layer["k"], layer["k"]))
                model.params[f"{path}.weight"] = Array(w, requires_grad=True)
                if layer.get("bias"):
                    model.params[f"{path}.bias"] = Array(np.zeros(layer["cout"]), requires_grad=True)
            elif kind == "linear":
                bound = np.sqrt(6.0 / layer["din"])
                w = rng.uniform(-bound, bound, size=(layer["din"], layer["dout"]))
                model.params[f"{path}.weight"] = Array(w, requires_grad=True)
                model.params[f"{path}.bias"] = Array(np.zeros(layer["dout"]), requires_grad=True)
            elif kind in ("bn", "gn"):
                ch = layer["ch"]
                model.params[f"{path}.gamma"] = Array(np.ones(ch), requires_grad=True)
                model.params[f"{path}.beta"] = Array(np.zeros(ch), requires_grad=True)
                if kind == "bn":
                    model.bn_state[path] = {"mean": np.zeros(ch), "var": np.ones(ch)}
            elif kind == "residual":
                init_plan(layer["body"], path + ".body.")
                if layer["proj"]:
                    init_plan(layer["proj"], path + ".proj.")
            elif kind not in ("relu", "avgpool", "gap", "flatten", "shuffle"):
                raise EngineError(f"unknown layer kind {kind!r} at {path}")

    init_plan(spec.plan, "")
    probe = Array(np.zeros((1, *spec.in_shape)))
    logits = model.forward(probe, mode="eval")
    if logits.shape != (1, spec.classes):
        raise EngineError(
            f"{spec.name}: plan produces {logits.shape}, expected (1, {spec.classes})")
    return model


# ---------------------------------------------------------------------------
# Backbone families


def make_tiny_resnet(in_shape, classes, width=8) -> BackboneSpec:
    c = in_shape[0]
    w1, w2 = width, width * 2
    plan = [
        conv(c, w1), bn(w1), relu(),
        residual(body=[conv(w1, w1), bn(w1), relu(), conv(w1, w1), bn(w1)]),
        relu(),
        residual(body=[conv(w1, w2, stride=2), bn(w2), relu(), conv(w2, w2), bn(w2)],
                 proj=[conv(w1, w2, k=1, stride=2, pad=0), bn(w2)]),
        relu(),
        gap(), linear(w2, classes),
    ]
    return BackboneSpec("tiny-resnet", plan, tuple(in_shape), classes)


def make_tiny_convnet_gn(in_shape, classes, width=16) -> BackboneSpec:
    c, h, w = in_shape
    if h % 8 or w % 8:
        raise EngineError(f"tiny-convnet-gn needs H,W divisible by 8, got {in_shape}")
    plan = [
        conv(c, width), gn(width), relu(), avgpool(2),
        conv(width, width), gn(width), relu(), avgpool(2),
        conv(width, width), gn(width), relu(), avgpool(2),
        flatten(), linear(width * (h // 8) * (w // 8), classes),
    ]
    return BackboneSpec("tiny-convnet-gn", plan, tuple(in_shape), classes)


def make_tiny_mobile(in_shape, classes, width=12) -> BackboneSpec:
    c = in_shape[0]
    w1, w2, w3 = width, width * 2, width * 3
    plan = [
        conv(c, w1), bn(w1), relu(),
        conv(w1, w1, stride=2, groups=w1), bn(w1), relu(),
        conv(w1, w2, k=1, pad=0), bn(w2), relu(),
        conv(w2, w2, stride=2, groups=w2), bn(w2), relu(),
        conv(w2, w3, k=1, pad=0), bn(w3), relu(),
        gap(), linear(w3, classes),
    ]
    return BackboneSpec("tiny-mobile", plan, tuple(in_shape), classes)


def make_tiny_shuffle(in_shape, classes, width=16) -> BackboneSpec:
    c = in_shape[0]
    w1, w2 = width, width * 2
    plan = [
        conv(c, w1), bn(w1), relu(),
        conv(w1, w2, k=1, pad=0, groups=2), bn(w2), relu(),
        shuffle(2),
        conv(w2, w2, stride=2, groups=w2), bn(w2), relu(),
        conv(w2, w2, k=1, pad=0, groups=2), bn(w2), relu(),
        gap(), linear(w2, classes),
    ]
    return BackboneSpec("tiny-shuffle", plan, tuple(in_shape), classes)


BACKBONE_FAMILIES = {
    "tiny-resnet": make_tiny_resnet,
    "tiny-convnet-gn": make_tiny_convnet_gn,
    "tiny-mobile": make_tiny_mobile,
    "tiny-shuffle": make_tiny_shuffle,
}

DEFAULT_POOL = ("tiny-resnet", "tiny-convnet-gn", "tiny-mobile", "tiny-shuffle")


def make_spec(name: str, in_shape, classes: int, width: int | None = None) -> BackboneSpec:
    if name not in BACKBONE_FAMILIES:
        raise EngineError(f"unknown backbone {name!r}; known: {sorted(BACKBONE_FAMILIES)}")
    kwargs = {"width": width} if width else {}
    return BACKBONE_FAMILIES[name](tuple(in_shape), classes, **kwargs)


class BackbonePool:
    """The candidate backbone set; draws are uniform from a seeded stream."""

    def __init__(self, members: list, seed: int = 0):
        if not members:
            raise EngineError("backbone pool must have at least one member")
        shapes = {tuple(m.spec.in_shape) for m in members}
        classes = {m.spec.classes for m in members}
        if len(shapes) > 1 or len(classes) > 1:
            raise EngineError("pool members must share input shape and class count")
        self.members = list(members)
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def names(self) -> list:
        return [m.spec.name for m in self.members]

    def draw(self) -> Model:
        return self.members[int(self._rng.integers(len(self.members)))]


# ---------------------------------------------------------------------------
# Parameter persistence: manifest plus one raw float64 blob per tensor.


def save_model(model: Model, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, dict] = {}
    for name in sorted(model.params):
        arr = model.params[name].data
        digest = write_blob(path / f"{name}.bin", arr)
        tensors[name] = {"shape": list(arr.shape), "hash": digest}
    buffers: dict[str, dict] = {}
    for bpath in sorted(model.bn_state):
        for field_name in ("mean", "var"):
            arr = model.bn_state[bpath][field_name]
            blob = f"{bpath}.running_{field_name}.bin"
            digest = write_blob(path / blob, arr)
            buffers[f"{bpath}.running_{field_name}"] = {"shape": list(arr.shape), "hash": digest}
    write_manifest(path / "manifest", {
        "kind": "backbone",
        "spec": model.spec.name,
        "seed": getattr(model, "init_seed", 0),
        "epochs": model.trained_epochs,
        "classes": model.spec.classes,
        "in_shape": list(model.spec.in_shape),
        "tensors": tensors,
        "buffers": buffers,
    })


def load_model(path) -> Model:
    path = Path(path)
    manifest = read_manifest(path / "manifest")
    if manifest.get("kind") != "backbone":
        raise ArtifactError(f"{path} is not a backbone directory")
    spec = make_spec(manifest["spec"], manifest["in_shape"], manifest["classes"])
    model = build_backbone(spec, seed=manifest.get("seed", 0))
    model.init_seed = manifest.get("seed", 0)
    model.trained_epochs = manifest.get("epochs", 0)
    for name, meta in manifest["tensors"].items():
        if name not in model.params:
            raise ArtifactError(f"unexpected tensor {name} in {path}")
        arr = read_blob(path / f"{name}.bin", tuple(meta["shape"]), expected_hash=meta["hash"])
        if arr.shape != model.params[name].data.shape:
            raise ArtifactError(f"tensor {name} shape mismatch in {path}")
        model.params[name].data = arr
    for name, meta in manifest["buffers"].items():
        bpath, field_name = name.rsplit(".running_", 1)
        arr = read_blob(path / f"{name}.bin", tuple(meta["shape"]), expected_hash=meta["hash"])
        model.bn_state[bpath][field_name] = arr
    return model
