import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aiectr import metrics
from aiectr.am2 import AM2Config
from aiectr.data import Dataset, FeatureSchema
from aiectr.model import (AdamConfig, BackboneConfig, CTRModel, LossSpec, StaleCacheError, TrainingDiverged,
                          bce_grad_logit, bce_loss, load_checkpoint, loss_and_grads, save_checkpoint, train_epoch)

import oracles
from conftest import FD_TOL, fd_check, random_dataset, small_schema

BACKBONES = [
    BackboneConfig("dnn", [6, 4], embed_dim=3),
    BackboneConfig("crossnet", [5], n_cross_layers=2, embed_dim=3),
    BackboneConfig("dnn", [5, 4], embed_dim=2, head_layers=[3]),
]


def model_and_store(backbone, am2=None, seed=0, schema=None):
    m = CTRModel(schema or small_schema(), backbone, am2)
    return m, m.init_params(seed)


# ------------------------------------------------------------------ forward
def test_zero_weights_give_half():
    m, s = model_and_store(BACKBONES[1])
    for name in s.names():
        s[name][...] = 0.0
    X = random_dataset(np.random.default_rng(0), 10).X
    assert np.all(m.forward(s, X).pctr == 0.5)


@pytest.mark.parametrize("bb", BACKBONES)
def test_batch_invariance(bb, rng):
    m, s = model_and_store(bb, seed=3)
    X = random_dataset(rng, 32).X
    full = m.forward(s, X).pctr
    for i in (0, 7, 31):
        # BLAS may take a different code path for a one-row product; agreement is to rounding
        assert m.forward(s, X[i:i + 1]).pctr[0] == pytest.approx(full[i], rel=1e-14)


@pytest.mark.parametrize("bb", BACKBONES)
def test_forward_matches_straight_line_oracle(bb, rng):
    m, s = model_and_store(bb, seed=5)
    for name in s.names():  # nonzero biases so every term is exercised
        if "/b" in name:
            s[name][...] = rng.normal(size=s[name].shape) * 0.1
    X = random_dataset(rng, 20).X
    np.testing.assert_allclose(m.forward(s, X).pctr, oracles.model_forward_loop(m, s, X), rtol=0, atol=1e-10)


def test_crossnet_without_cross_layers_equals_dnn(rng):
    dnn, s1 = model_and_store(BackboneConfig("dnn", [4], embed_dim=3), seed=2)
    cross, s2 = model_and_store(BackboneConfig("crossnet", [4], n_cross_layers=0, embed_dim=3), seed=2)
    X = random_dataset(rng, 15).X
    assert np.array_equal(dnn.predict(s1, X), cross.predict(s2, X))


def test_index_out_of_range_names_field():
    m, s = model_and_store(BACKBONES[0])
    X = np.array([[0, 0, 9, 0]])
    with pytest.raises(IndexError, match="slotid"):
        m.forward(s, X)


def test_predict_equals_forward(rng):
    m, s = model_and_store(BACKBONES[0], AM2Config(enabled=True, tower_widths=[3], scen_dim=2))
    X = random_dataset(rng, 40).X
    assert np.array_equal(m.predict(s, X, batch_size=7), m.forward(s, X).pctr)


# --------------------------------------------------------------------- loss
def test_bce_half_is_ln2():
    assert bce_loss(np.array([0.5, 0.5]), np.array([1.0, 1.0]), np.ones(2)) == pytest.approx(math.log(2), abs=1e-15)


def test_bce_zero_weight_positive_batch():
    assert bce_loss(np.array([0.3, 0.9]), np.ones(2), np.zeros(2)) == 0.0


def test_bce_matches_loop(rng):
    p, y, w = rng.random(100), (rng.random(100) < 0.5).astype(float), rng.random(100) * 2
    assert abs(bce_loss(p, y, w) - oracles.bce_loop(p, y, w)) < 1e-12


def test_bce_rejects_negative_weights():
    with pytest.raises(ValueError):
        bce_loss(np.array([0.5]), np.array([1.0]), np.array([-1.0]))


def test_bce_grad_logit_finite_differences(rng):
    z = rng.normal(size=12)
    y = (rng.random(12) < 0.5).astype(float)
    w = rng.random(12) + 0.5
    f = lambda: bce_loss(1 / (1 + np.exp(-z)), y, w)
    g = bce_grad_logit(1 / (1 + np.exp(-z)), y, w)
    assert oracles.rel_error(oracles.central_diff(f, z), g) < FD_TOL


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(1e-6, 1 - 1e-6), st.booleans()), min_size=1, max_size=30))
def test_unit_weights_equal_unweighted(rows):
    p = np.array([r[0] for r in rows])
    y = np.array([float(r[1]) for r in rows])
    assert bce_loss(p, y, np.ones(len(p))) == bce_loss(p, y)


# ----------------------------------------------------------------- backward
@pytest.mark.parametrize("bb", BACKBONES)
def test_zero_upstream_gives_zero_grads(bb, rng):
    m, s = model_and_store(bb, AM2Config(enabled=True, tower_widths=[3], scen_dim=2))
    out = m.forward(s, random_dataset(rng, 8).X)
    grads = m.backward(out.cache, np.zeros(8), np.zeros(8))
    assert set(grads) == set(s.names())
    assert all(not np.any(g) for g in grads.values())
    assert all(grads[n].shape == s[n].shape for n in s.names())


@pytest.mark.parametrize("bb", BACKBONES)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backward_finite_differences(bb, seed):
    rng = np.random.default_rng(seed)
    am2 = AM2Config(enabled=True, w=0.3, tower_widths=[3], scen_dim=2)
    m, s = model_and_store(bb, am2, seed=seed)
    ds = random_dataset(rng, 7)
    weights = np.where(ds.y == 1, rng.random(7) + 0.5, 1.0)
    errors = fd_check(m, s, ds.X, ds.y, ds.payprice, weights, am2_w=0.3, seed=seed)
    assert max(errors.values()) < FD_TOL, errors


def test_unused_embedding_rows_get_zero_grad():
    m, s = model_and_store(BACKBONES[0])
    X = np.array([[0, 1, 2, 3], [0, 1, 4, 3]])
    out = m.forward(s, X)
    grads = m.backward(out.cache, np.ones(2))
    assert not np.any(grads["emb/ad"][[0, 1, 2]])
    assert np.any(grads["emb/ad"][3])
    assert not np.any(grads["emb/slotid"][[0, 1, 3]])


def test_stale_cache_rejected(rng):
    m, s = model_and_store(BACKBONES[0])
    out = m.forward(s, random_dataset(rng, 4).X)
    grads = m.backward(out.cache, np.ones(4))
    s.step(grads, lr=0.01)
    with pytest.raises(StaleCacheError):
        m.backward(out.cache, np.ones(4))


# ---------------------------------------------------------------- training
def test_zero_learning_rate_keeps_params(rng):
    m, s = model_and_store(BACKBONES[1])
    before = {k: v.copy() for k, v in s.params.items()}
    train_epoch(m, s, random_dataset(rng, 50), LossSpec(), AdamConfig(lr=0.0), batch_size=10)
    assert all(np.array_equal(before[k], s[k]) for k in before)


def separable_toy(n=200, seed=0):
    rng = np.random.default_rng(seed)
    schema = FeatureSchema((("slotid", 2), ("ad", 10)), group_fields=("slotid",))
    ad = rng.integers(0, 10, n)
    X = np.stack([rng.integers(0, 2, n), ad], axis=1)
    y = (ad >= 5).astype(float)
    return Dataset(schema, X, y, np.ones(n), np.ones(n))


@pytest.mark.parametrize("bb", [BackboneConfig("dnn", [8], embed_dim=4),
                                BackboneConfig("crossnet", [8], n_cross_layers=1, embed_dim=4)])
def test_separable_toy_learns(bb):
    ds = separable_toy()
    m = CTRModel(ds.schema, bb)
    s = m.init_params(0)
    for epoch in range(5):
        train_epoch(m, s, ds, LossSpec(), AdamConfig(lr=0.05), batch_size=20, seed=epoch)
    assert metrics.auc(m.predict(s, ds.X), ds.y) > 0.95


def test_training_deterministic(rng):
    ds = random_dataset(rng, 120)
    am2 = AM2Config(enabled=True, w=0.01, tower_widths=[3], scen_dim=2)
    finals = []
    for _ in range(2):
        m, s = model_and_store(BACKBONES[1], am2, seed=4)
        stats = train_epoch(m, s, ds, LossSpec(0.01), AdamConfig(lr=0.01), batch_size=16, seed=9)
        finals.append((s, stats))
    (a, sa), (b, sb) = finals
    assert sa == sb
    assert all(np.array_equal(a[k], b[k]) for k in a.names())


def test_epoch_stats(rng):
    ds = random_dataset(rng, 50)
    m, s = model_and_store(BACKBONES[0], AM2Config(enabled=True, w=0.5, tower_widths=[2], scen_dim=2))
    stats = train_epoch(m, s, ds, LossSpec(0.5), AdamConfig(lr=1e-3), batch_size=20)
    assert stats.steps == 3
    assert stats.mean_loss == pytest.approx(stats.mean_ctr_loss + 0.5 * stats.mean_price_loss)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # infinite weights are the point of this test
def test_divergence_reports_last_good_step(rng):
    ds = random_dataset(rng, 40)
    m, s = model_and_store(BACKBONES[0])
    w = np.ones(40)
    w[ds.y == 1] = np.inf
    with pytest.raises(TrainingDiverged) as info:
        train_epoch(m, s, ds, LossSpec(0.0, w), AdamConfig(), batch_size=10)
    assert info.value.last_good_step == 0


def test_empty_dataset_rejected(rng):
    m, s = model_and_store(BACKBONES[0])
    with pytest.raises(ValueError):
        train_epoch(m, s, random_dataset(rng, 5).subset([]), LossSpec(), AdamConfig())


# -------------------------------------------------------------- checkpoints
def test_checkpoint_round_trip_exact(tmp_path, rng):
    m, s = model_and_store(BACKBONES[1], AM2Config(enabled=True, tower_widths=[3], scen_dim=2), seed=8)
    save_checkpoint(tmp_path / "ck" / "model", m, s, {"note": 1})
    m2, s2, extra = load_checkpoint(tmp_path / "ck" / "model")
    assert extra == {"note": 1}
    assert set(s2.names()) == set(s.names())
    assert all(np.array_equal(s[k], s2[k]) for k in s.names())
    X = random_dataset(rng, 10).X
    assert np.array_equal(m.predict(s, X), m2.predict(s2, X))
    assert m2.schema == m.schema and m2.backbone == m.backbone and m2.am2 == m.am2
