"""Backbone construction, taps, pretraining, and persistence."""

import numpy as np
import pytest

from statdistill.data import make_blobs, make_digits16
from statdistill.engine import Array, no_grad, ops
from statdistill.errors import ArtifactError, EngineError
from statdistill.nets import (BACKBONE_FAMILIES, DEFAULT_POOL, BackbonePool,
                              BackboneSpec, build_backbone, load_model,
                              make_spec, save_model)
from statdistill.pretrain import PretrainConfig, pretrain


def test_same_spec_seed_bitwise_identical():
    spec = make_spec("tiny-resnet", (1, 16, 16), 10)
    a = build_backbone(spec, seed=3)
    b = build_backbone(spec, seed=3)
    assert a.state_hash() == b.state_hash()
    c = build_backbone(spec, seed=4)
    assert a.state_hash() != c.state_hash()


@pytest.mark.parametrize("name", DEFAULT_POOL)
def test_forward_shape_and_param_budget(name):
    spec = make_spec(name, (3, 16, 16), 10)
    model = build_backbone(spec, seed=0)
    out = model.forward(Array(np.zeros((4, 3, 16, 16))))
    assert out.shape == (4, 10)
    assert model.param_count() < 200_000


def test_convnet_gn_has_no_bn_taps():
    spec = make_spec("tiny-convnet-gn", (1, 16, 16), 10)
    layout = spec.tap_layout()
    assert sum(1 for kind, _ in layout if kind == "bn") == 0
    assert sum(1 for kind, _ in layout if kind == "conv") >= 3
    assert all(k == "gn" for k in spec.norm_kinds())


def test_tap_count_matches_spec():
    for name in DEFAULT_POOL:
        spec = make_spec(name, (1, 16, 16), 10)
        model = build_backbone(spec, seed=0)
        _, taps = model.forward_with_taps(Array(np.zeros((2, 1, 16, 16))))
        conv_taps = [t for t in taps if t.kind == "conv"]
        assert len(conv_taps) == spec.conv_tap_count()
        assert len([t for t in taps if t.kind == "bn"]) == spec.bn_tap_count()


def test_zero_input_zero_conv_tap():
    spec = make_spec("tiny-resnet", (1, 16, 16), 10)
    model = build_backbone(spec, seed=1)
    _, taps = model.forward_with_taps(Array(np.zeros((2, 1, 16, 16))))
    first_conv = next(t for t in taps if t.kind == "conv")
    np.testing.assert_array_equal(first_conv.output.data, 0.0)


def test_bn_tap_reports_batch_statistics():
    spec = make_spec("tiny-resnet", (1, 16, 16), 10)
    model = build_backbone(spec, seed=1)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 1, 16, 16))
    _, taps = model.forward_with_taps(Array(x))
    conv_out = taps[0].output.data
    bn_tap = taps[1]
    np.testing.assert_allclose(bn_tap.batch_mean.data, conv_out.mean(axis=(0, 2, 3)),
                               atol=1e-12)
    np.testing.assert_allclose(bn_tap.batch_var.data, conv_out.var(axis=(0, 2, 3)),
                               atol=1e-10)


def test_unknown_layer_kind_rejected():
    spec = BackboneSpec("broken", [{"kind": "mystery"}], (1, 8, 8), 2)
    with pytest.raises(EngineError, match="mystery"):
        build_backbone(spec, seed=0)


def test_unknown_backbone_name_rejected():
    with pytest.raises(EngineError, match="unknown backbone"):
        make_spec("resnet-152", (1, 16, 16), 10)


def test_pretrain_blobs_beats_oracle_floor():
    # Independent oracle: plain logistic regression separates the blobs.
    from sklearn.linear_model import LogisticRegression

    ds = make_blobs(3, train_size=256, test_size=64)
    flat = ds.train_x.reshape(len(ds.train_x), -1)
    oracle = LogisticRegression(max_iter=1000).fit(flat, ds.train_y)
    assert oracle.score(flat, ds.train_y) >= 0.99

    model = build_backbone(make_spec("tiny-convnet-gn", (1, 8, 8), 2), seed=0)
    model, acc = pretrain(model, ds, config=PretrainConfig(epochs=5, batch_size=16), seed=0)
    assert acc >= 0.95


def test_pretrain_rejects_zero_epochs():
    ds = make_blobs(3, train_size=64, test_size=32)
    model = build_backbone(make_spec("tiny-convnet-gn", (1, 8, 8), 2), seed=0)
    with pytest.raises(ValueError, match="epochs"):
        pretrain(model, ds, epochs=0)


def test_pretrain_default_epochs_is_five():
    assert PretrainConfig().epochs == 5


def test_bn_running_stats_follow_ema_recurrence():
    spec = make_spec("tiny-resnet", (1, 8, 8), 2)
    model = build_backbone(spec, seed=2)
    rng = np.random.default_rng(9)
    bn_paths = [path for kind, path in spec.tap_layout() if kind == "bn"]
    replay = {p: {"mean": np.zeros_like(model.bn_state[p]["mean"]),
                  "var": np.ones_like(model.bn_state[p]["var"])} for p in bn_paths}
    mom = model.bn_momentum
    for _ in range(7):
        x = rng.standard_normal((6, 1, 8, 8))
        _, taps = model.forward_with_taps(Array(x), mode="train")
        for tap in taps:
            if tap.kind != "bn":
                continue
            replay[tap.path]["mean"] = (1 - mom) * replay[tap.path]["mean"] + mom * tap.batch_mean.data
            replay[tap.path]["var"] = (1 - mom) * replay[tap.path]["var"] + mom * tap.batch_var.data
    for p in bn_paths:
        np.testing.assert_allclose(model.bn_state[p]["mean"], replay[p]["mean"], atol=1e-9)
        np.testing.assert_allclose(model.bn_state[p]["var"], replay[p]["var"], atol=1e-9)


def test_eval_forward_batch_composition_independent():
    ds = make_digits16(1, train_size=64, test_size=32)
    model = build_backbone(make_spec("tiny-mobile", (1, 16, 16), 10), seed=5)
    with no_grad():
        batched = model.forward(Array(ds.train_x[:6]), mode="eval").data
        single = model.forward(Array(ds.train_x[2:3]), mode="eval").data
    np.testing.assert_allclose(batched[2], single[0], atol=1e-12)
    with no_grad():
        again = model.forward(Array(ds.train_x[:6]), mode="eval").data
    assert batched.tobytes() == again.tobytes()


def test_model_save_load_roundtrip(tmp_path):
    ds = make_blobs(3, train_size=64, test_size=16)
    model = build_backbone(make_spec("tiny-resnet", (1, 8, 8), 2), seed=7)
    model, _ = pretrain(model, ds, config=PretrainConfig(epochs=1, batch_size=16), seed=1)
    save_model(model, tmp_path / "m")
    loaded = load_model(tmp_path / "m")
    assert loaded.state_hash() == model.state_hash()
    assert loaded.trained_epochs == model.trained_epochs


def test_model_load_rejects_corrupt_blob(tmp_path):
    model = build_backbone(make_spec("tiny-resnet", (1, 8, 8), 2), seed=7)
    save_model(model, tmp_path / "m")
    blob = next((tmp_path / "m").glob("*.weight.bin"))
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(ArtifactError, match=blob.name):
        load_model(tmp_path / "m")


def test_pool_requires_consistent_members():
    a = build_backbone(make_spec("tiny-resnet", (1, 8, 8), 2), seed=0)
    b = build_backbone(make_spec("tiny-mobile", (1, 16, 16), 10), seed=0)
    with pytest.raises(EngineError, match="share"):
        BackbonePool([a, b])
    with pytest.raises(EngineError, match="at least one"):
        BackbonePool([])


def test_pool_draw_uniform():
    models = [build_backbone(make_spec(n, (1, 16, 16), 10), seed=i)
              for i, n in enumerate(DEFAULT_POOL)]
    pool = BackbonePool(models, seed=123)
    counts = {n: 0 for n in DEFAULT_POOL}
    for _ in range(4000):
        counts[pool.draw().spec.name] += 1
    for n in DEFAULT_POOL:
        assert abs(counts[n] - 1000) <= 100, counts
