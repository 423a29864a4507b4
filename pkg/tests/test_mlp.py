import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causalign import autodiff as ad
from causalign.errors import ConfigError, ShapeError, ValidationError
from causalign.mlp import (Mlp, MlpConfig, interchange_accuracy, train, train_with_interventions)
from causalign.tasks import BaseDataset, gen_base_dataset, gen_interchange_dataset


def small(seed=0, dims=(5, 6, 4), d_in=3):
    return Mlp.init(MlpConfig(d_in, dims, seed=seed))


def test_config_validation():
    with pytest.raises(ConfigError):
        MlpConfig(16, ())
    with pytest.raises(ConfigError):
        MlpConfig(16, (16, 0))
    with pytest.raises(ConfigError):
        MlpConfig(16, batch=0)


def test_zero_weights_give_zero_activations():
    m = small()
    for p in m.parameters():
        p.data[...] = 0.0
    x = np.random.default_rng(0).normal(size=(7, 3))
    for l in range(1, 4):
        assert not m.forward_to_layer(x, l).data.any()


def test_identity_first_layer_passes_input():
    m = Mlp.init(MlpConfig(4, (4, 3), seed=0))
    m.weights[0].data = np.eye(4)
    x = np.random.default_rng(1).normal(size=(5, 4))
    np.testing.assert_array_equal(m.forward_to_layer(x, 1).data, x)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 3))
def test_splice_identity(seed, layer):
    m = small(seed)
    x = np.random.default_rng(seed).normal(size=(11, 3))
    full = m.forward(x).data
    spliced = m.forward_from_layer(m.forward_to_layer(x, layer), layer).data
    assert np.abs(full - spliced).max() < 1e-12
    np.testing.assert_allclose(full.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(m.numpy_logits_from_layer(m.hidden_states(x)[layer - 1], layer),
                               m.logits(x).data, atol=1e-12)


def test_layer_and_shape_errors():
    m = small()
    with pytest.raises(ValidationError):
        m.forward_to_layer(np.zeros((1, 3)), 0)
    with pytest.raises(ValidationError):
        m.forward_to_layer(np.zeros((1, 3)), 4)
    with pytest.raises(ShapeError):
        m.forward_from_layer(np.zeros((1, 7)), 2)


def test_model_gradient_matches_finite_differences():
    m = small(3)
    x = np.random.default_rng(0).normal(size=(4, 3))
    y = np.array([0, 1, 1, 0])

    def loss():
        return ad.softmax_cross_entropy(m.logits(x), y)

    out = loss()
    out.backward()
    h = 1e-6
    for p in m.parameters():
        num = np.zeros_like(p.data)
        for idx in np.ndindex(p.shape):
            old = p.data[idx]
            p.data[idx] = old + h
            up = loss().item()
            p.data[idx] = old - h
            dn = loss().item()
            p.data[idx] = old
            num[idx] = (up - dn) / (2 * h)
        err = np.linalg.norm(p.grad - num) / max(np.linalg.norm(p.grad) + np.linalg.norm(num), 1e-12)
        assert err < 1e-4


def test_heq_training_reaches_high_accuracy(heq_mlp):
    te = gen_base_dataset("heq", 10000, 3)
    assert heq_mlp.accuracy(te.x, te.y) > 0.99


def test_flipped_labels_invert_accuracy():
    tr = gen_base_dataset("heq", 131072, 5)
    cfg = MlpConfig(16, (16, 16, 16), seed=1)
    m = Mlp.init(cfg)
    flip = BaseDataset("heq", tr.x, 1 - tr.y)
    train(m, flip, cfg, BaseDataset("heq", tr.x[:5000], 1 - tr.y[:5000]))
    te = gen_base_dataset("heq", 10000, 6)
    assert m.accuracy(te.x, te.y) <= 0.02


def test_training_is_deterministic_and_loss_falls():
    tr, ev = gen_base_dataset("heq", 8192, 0), gen_base_dataset("heq", 1000, 1)
    cfg = MlpConfig(16, (16, 16, 16), seed=2, max_epochs=4)
    a, b = Mlp.init(cfg), Mlp.init(cfg)
    init_loss = ad.softmax_cross_entropy(a.logits(tr.x), tr.y).item()
    ra, rb = train(a, tr, cfg, ev), train(b, tr, cfg, ev)
    for k, v in a.state().items():
        np.testing.assert_array_equal(v, b.state()[k])
    losses = [h["loss"] for h in ra.history]
    assert losses[0] < init_loss
    assert all(x > y for x, y in zip(losses, losses[1:]))
    assert ra.history == rb.history


def test_early_stopping_restores_best():
    tr = gen_base_dataset("heq", 4096, 0)
    cfg = MlpConfig(16, (16, 16, 16), seed=3, max_epochs=30, patience=1)
    m = Mlp.init(cfg)
    res = train(m, tr, cfg, gen_base_dataset("heq", 500, 1))
    assert res.best_eval == max(h["eval_acc"] for h in res.history)
    assert m.accuracy(*_xy(gen_base_dataset("heq", 500, 1))) == res.best_eval


def _xy(ds):
    return ds.x, ds.y


def test_save_load_roundtrip(tmp_path, heq_mlp):
    heq_mlp.save(tmp_path / "m")
    back = Mlp.load(tmp_path / "m")
    x = gen_base_dataset("heq", 50, 0).x
    np.testing.assert_array_equal(back.logits(x).data, heq_mlp.logits(x).data)


def test_interventions_reject_overlapping_partition():
    ds = gen_interchange_dataset("dlaw", "and-or-and", 50, 0)
    m = Mlp.init(MlpConfig(24, (24, 24, 24)))
    bad = {ds.nodes[0]: range(0, 12), ds.nodes[1]: range(10, 22)}
    with pytest.raises(ValidationError):
        train_with_interventions(m, ds, 2, bad, MlpConfig(24, (24, 24, 24)))


def test_no_interventions_reduces_to_plain_training():
    ds = gen_interchange_dataset("dlaw", "and-or-and", 3000, 0, [((), 1.0)])
    assert not ds.mask.any()
    cfg = MlpConfig(24, (24, 24, 24), seed=4, max_epochs=2)
    part = {ds.nodes[0]: range(0, 12), ds.nodes[1]: range(12, 24)}
    a, b = Mlp.init(cfg), Mlp.init(cfg)
    train_with_interventions(a, ds, 2, part, cfg)
    train(b, BaseDataset("dlaw", ds.x_base, ds.y_gold), cfg)
    for k, v in a.state().items():
        np.testing.assert_allclose(v, b.state()[k], atol=1e-9)


def test_identity_patch_of_whole_layer_equals_source_run(heq_mlp):
    ds = gen_interchange_dataset("heq", "both-eq", 200, 1, [(("x1==x2", "x3==x4"), 1.0)])
    # give both nodes the same source so the whole layer comes from it
    ds.sources[:, 1] = ds.sources[:, 0]
    part = {"x1==x2": range(0, 8), "x3==x4": range(8, 16)}
    from causalign.mlp import interchange_logits
    got = interchange_logits(heq_mlp, 2, part, ds.x_base, ds.sources, ds.mask).data
    np.testing.assert_allclose(got, heq_mlp.logits(ds.sources[:, 0]).data, atol=1e-12)
    assert 0.0 <= interchange_accuracy(heq_mlp, 2, part, ds) <= 1.0
