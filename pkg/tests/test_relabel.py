"""Ensemble soft labels: normalization, records, and store persistence."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from statdistill.data import make_blobs
from statdistill.engine import Array
from statdistill.errors import ArtifactError, EngineError
from statdistill.nets import BackbonePool, build_backbone, make_spec
from statdistill.relabel import (SoftLabelStore, derive_view_seed,
                                 ensemble_logits, load_store, relabel_dataset,
                                 save_store)
from statdistill.synth import init_synthetic


@pytest.fixture(scope="module")
def tiny_pool():
    models = [build_backbone(make_spec("tiny-convnet-gn", (1, 8, 8), 2), seed=i)
              for i in range(3)]
    return BackbonePool(models, seed=0)


@pytest.fixture(scope="module")
def blob_data():
    return make_blobs(3, train_size=32, test_size=8)


def test_identical_members_equal_single_model(blob_data):
    model = build_backbone(make_spec("tiny-convnet-gn", (1, 8, 8), 2), seed=4)
    twin = build_backbone(make_spec("tiny-convnet-gn", (1, 8, 8), 2), seed=4)
    pool = BackbonePool([model, twin], seed=0)
    x = Array(blob_data.train_x[:6])
    single = model.forward(x).data
    for use_ln in (False, True):
        z = ensemble_logits(x, pool, use_ln=use_ln)
        np.testing.assert_allclose(z, single, atol=1e-12)


def test_ln_hand_computed_two_member_case(blob_data):
    class Stub:
        def __init__(self, scale, base):
            self.scale = scale
            self.base = base
            self.spec = type("S", (), {"classes": base.shape[1], "in_shape": (1, 8, 8),
                                       "name": f"stub{scale}"})()

        def forward(self, x, mode="eval"):
            return Array(self.scale * self.base)

    rng = np.random.default_rng(0)
    z1 = rng.standard_normal((4, 5))
    pool = BackbonePool([Stub(1.0, z1), Stub(2.0, z1)], seed=0)
    z = ensemble_logits(Array(np.zeros((4, 1, 8, 8))), pool, use_ln=True)
    # Norms n and 2n; mean 1.5n: both members rescale to 1.5*z1.
    np.testing.assert_allclose(z, 1.5 * z1, atol=1e-12)


def test_ln_equalizes_member_norms(tiny_pool, blob_data):
    x = Array(blob_data.train_x[:5])
    member = [m.forward(x).data for m in tiny_pool]
    norms = np.array([np.linalg.norm(z) for z in member])
    mean_norm = norms.mean()
    rescaled_norms = [np.linalg.norm(z * (mean_norm / n)) for z, n in zip(member, norms)]
    assert max(rescaled_norms) - min(rescaled_norms) <= 1e-9


def test_ln_invariant_to_member_rescaling(tiny_pool, blob_data):
    class Scaled:
        def __init__(self, inner, factor):
            self.inner = inner
            self.factor = factor
            self.spec = inner.spec

        def forward(self, x, mode="eval"):
            return Array(self.factor * self.inner.forward(x, mode).data)

    x = Array(blob_data.train_x[:5])
    base = ensemble_logits(x, tiny_pool, use_ln=True)
    scaled_pool = BackbonePool(
        [Scaled(m, f) for m, f in zip(tiny_pool.members, (0.5, 3.0, 7.0))], seed=0)
    scaled = ensemble_logits(x, scaled_pool, use_ln=True)
    # Member norms cancel in the relative contributions: the ensemble changes
    # only by a global positive scalar, so the direction must be invariant.
    np.testing.assert_allclose(scaled / np.linalg.norm(scaled),
                               base / np.linalg.norm(base), atol=1e-9)
    assert (np.sign(scaled) == np.sign(base)).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_ln_rescaling_preserves_member_argmax(seed, factor):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(7)
    assert np.argmax(z * factor) == np.argmax(z)


def test_zero_norm_member_excluded(blob_data):
    class Zero:
        def __init__(self):
            self.spec = type("S", (), {"classes": 2, "in_shape": (1, 8, 8), "name": "zero"})()

        def forward(self, x, mode="eval"):
            return Array(np.zeros((x.shape[0], 2)))

    class Ones:
        def __init__(self):
            self.spec = type("S", (), {"classes": 2, "in_shape": (1, 8, 8), "name": "ones"})()

        def forward(self, x, mode="eval"):
            return Array(np.ones((x.shape[0], 2)))

    pool = BackbonePool([Zero(), Ones()], seed=0)
    x = Array(np.zeros((3, 1, 8, 8)))
    with pytest.warns(UserWarning, match="zero-norm"):
        z = ensemble_logits(x, pool, use_ln=True)
    np.testing.assert_allclose(z, np.ones((3, 2)), atol=1e-12)


def test_relabel_identity_view_matches_raw_logits(tiny_pool, blob_data):
    syn = init_synthetic(blob_data, ipc=3, mode="real-init", seed=1)
    store = relabel_dataset(syn, tiny_pool, epochs=5, seed=2, augment=False)
    assert store.epochs == 1
    raw = ensemble_logits(Array(syn.images.data), tiny_pool, use_ln=True)
    for i in range(syn.images.data.shape[0]):
        _, z = store.record_for(i, 0)
        np.testing.assert_allclose(z, raw[i], atol=1e-12)


def test_relabel_deterministic(tiny_pool, blob_data):
    syn = init_synthetic(blob_data, ipc=2, seed=1)
    a = relabel_dataset(syn, tiny_pool, epochs=3, seed=5)
    b = relabel_dataset(syn, tiny_pool, epochs=3, seed=5)
    assert a.sorted_keys() == b.sorted_keys()
    for key in a.sorted_keys():
        assert a.records[key].tobytes() == b.records[key].tobytes()


def test_soft_label_rows_sum_to_one(tiny_pool, blob_data):
    syn = init_synthetic(blob_data, ipc=2, seed=1)
    store = relabel_dataset(syn, tiny_pool, epochs=2, seed=5, tau=3.7)
    for i in range(4):
        for tau in (0.5, 3.7, 50.0):
            p = store.probabilities(i, 0, tau=tau)
            assert p.sum() == pytest.approx(1.0, abs=1e-9)
            assert (p >= 0).all()
    with pytest.raises(EngineError, match="temperature"):
        store.probabilities(0, 0, tau=0.0)


def test_every_image_covered(tiny_pool, blob_data):
    syn = init_synthetic(blob_data, ipc=4, seed=1)
    store = relabel_dataset(syn, tiny_pool, epochs=3, seed=5)
    grouped = store.per_image()
    assert sorted(grouped) == list(range(8))
    assert all(len(v) == 3 for v in grouped.values())


def test_view_seed_derivation_is_stable():
    a = derive_view_seed(7, 2, 11)
    assert a == derive_view_seed(7, 2, 11)
    assert a != derive_view_seed(7, 2, 12)
    assert a != derive_view_seed(7, 3, 11)
    assert 0 <= a < 2**63


def test_store_roundtrip_lossless(tmp_path, tiny_pool, blob_data):
    syn = init_synthetic(blob_data, ipc=3, seed=1)
    store = relabel_dataset(syn, tiny_pool, epochs=4, seed=5, tau=2.5)
    save_store(store, tmp_path / "labels.bin")
    loaded = load_store(tmp_path / "labels.bin")
    assert loaded.classes == store.classes
    assert loaded.epochs == store.epochs
    assert loaded.use_ln == store.use_ln
    assert loaded.tau == store.tau
    assert loaded.sorted_keys() == store.sorted_keys()
    for key in store.sorted_keys():
        assert loaded.records[key].tobytes() == store.records[key].tobytes()


def test_store_truncation_rejected(tmp_path, tiny_pool, blob_data):
    syn = init_synthetic(blob_data, ipc=2, seed=1)
    store = relabel_dataset(syn, tiny_pool, epochs=2, seed=5)
    path = tmp_path / "labels.bin"
    save_store(store, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(ArtifactError, match="truncated"):
        load_store(path)


def test_store_bitflip_rejected(tmp_path, tiny_pool, blob_data):
    syn = init_synthetic(blob_data, ipc=2, seed=1)
    store = relabel_dataset(syn, tiny_pool, epochs=2, seed=5)
    path = tmp_path / "labels.bin"
    save_store(store, path)
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ArtifactError, match="checksum"):
        load_store(path)


def test_store_wrong_magic_rejected(tmp_path):
    path = tmp_path / "bogus.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ArtifactError, match="magic"):
        load_store(path)


def test_missing_record_named():
    store = SoftLabelStore(classes=2, image_count=2, epochs=1, use_ln=True, tau=4.0)
    store.add(0, 123, np.array([1.0, 2.0]))
    with pytest.raises(ArtifactError, match="image 1"):
        store.record_for(1, 0)
    with pytest.raises(ArtifactError, match="epoch slot 1"):
        store.record_for(0, 1)


def test_nonfinite_record_rejected():
    store = SoftLabelStore(classes=2, image_count=1, epochs=1, use_ln=False, tau=4.0)
    with pytest.raises(EngineError, match="non-finite"):
        store.add(0, 1, np.array([np.nan, 0.0]))
