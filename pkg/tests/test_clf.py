import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_array_equal

from prospectr.clf import (ClassifierConfig, MLPClassifier, ProspectivityNet, bce_loss, mc_predict, predict_map,
                           strided_ids, train_classifier)
from prospectr.config import RunConfig
from prospectr.experiments import make_split, prepare, similarity_features
from prospectr.metrics import ConfusionCounts, f1
from prospectr.nn import ViTConfig, ViTEncoder, count_params_flops
from prospectr.raster import GeoTransform, MultiBandRaster
from prospectr.synth import WorldSpec, generate_world
from prospectr.tensor import ContractError, Tensor, default_dtype, grad_check, rng_stream

SMALL_CFG = ClassifierConfig(hidden=(16, 8), epochs=200, patience=200, batch_size=32)


def separable(n=80, d=5, seed=0):
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, d)).astype(np.float32)
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(np.float32)
    x[:, 0] += np.where(y == 1, 1.0, -1.0)  # margin
    return x, y


# -- loss ------------------------------------------------------------------------

def test_bce_half_is_ln2():
    assert bce_loss(Tensor(np.full(6, 0.5)), np.r_[np.ones(3), np.zeros(3)]).item() == pytest.approx(math.log(2),
                                                                                                    abs=1e-6)


def test_bce_confident_predictions_hit_clamp():
    loss = bce_loss(Tensor(np.array([1.0, 0.0])), np.array([1.0, 0.0])).item()
    assert 0 < loss < 2e-7


def test_bce_matches_loop_oracle(rng):
    p, y = rng.uniform(0.01, 0.99, 20), rng.integers(0, 2, 20)
    with default_dtype(np.float64):
        got = bce_loss(Tensor(p), y).item()
    ref = 0.0
    for pi, yi in zip(p, y):
        ref -= yi * math.log(pi) + (1 - yi) * math.log(1 - pi)
    assert abs(got - ref / 20) < 1e-6


# -- model --------------------------------------------------------------------------

def test_default_head_params_near_reference():
    params, _ = count_params_flops(MLPClassifier(256))
    assert abs(params - 0.04e6) / 0.04e6 < 0.25


def test_classifier_grad_check_float64(rng):
    with default_dtype(np.float64):
        mlp = MLPClassifier(5, ClassifierConfig(hidden=(6, 4)), seed=2)
        for width, d in zip((6, 4), mlp.dropouts):
            d.mask_override = rng.random((8, width)) > 0.2
        x = Tensor(rng.normal(size=(8, 5)))
        y = rng.integers(0, 2, 8)
        rep = grad_check(lambda *a: bce_loss(mlp(x), y), [x] + mlp.parameters(), eps=1e-6, tol=1e-6)
    assert rep.passed, rep


# -- training --------------------------------------------------------------------------

def test_separable_fixture_reaches_perfect_train_f1():
    x, y = separable()
    mlp = MLPClassifier(5, SMALL_CFG, seed=0)
    res = train_classifier(mlp, x, y, x, y, SMALL_CFG, seed=0)
    mlp.eval()
    pred = mlp(x).data
    assert f1(ConfusionCounts.from_scores(pred, y)) == 1.0
    assert res.best_val_f1 == 1.0 and res.best_epoch <= 200


def test_zero_epochs_returns_model_unchanged():
    x, y = separable()
    mlp = MLPClassifier(5, SMALL_CFG, seed=0)
    before = mlp.checksum()
    res = train_classifier(mlp, x, y, cfg=ClassifierConfig(hidden=(16, 8), epochs=0), seed=0)
    assert res.model is mlp and mlp.checksum() == before


def test_empty_training_set_rejected():
    with pytest.raises(ContractError):
        train_classifier(MLPClassifier(5, SMALL_CFG), np.zeros((0, 5)), np.zeros(0), cfg=SMALL_CFG)


def test_frozen_encoder_unchanged_by_training(rng):
    enc = ViTEncoder(ViTConfig(bands=2, window=8, patch=4, dim=8, depth=1, heads=2), 0)
    net = ProspectivityNet(MLPClassifier(8, SMALL_CFG), enc, frozen=True)
    before = enc.checksum()
    x = rng.normal(size=(20, 2, 8, 8)).astype(np.float32)
    y = (rng.random(20) < 0.5).astype(np.float32)
    cfg = ClassifierConfig(hidden=(16, 8), epochs=5)
    train_classifier(net, x, y, x, y, cfg, seed=0)
    assert enc.checksum() == before


def test_unfrozen_encoder_is_trained(rng):
    enc = ViTEncoder(ViTConfig(bands=2, window=8, patch=4, dim=8, depth=1, heads=2), 0)
    net = ProspectivityNet(MLPClassifier(8, SMALL_CFG), enc, frozen=False)
    before = enc.checksum()
    x = rng.normal(size=(20, 2, 8, 8)).astype(np.float32)
    y = (rng.random(20) < 0.5).astype(np.float32)
    train_classifier(net, x, y, cfg=ClassifierConfig(hidden=(16, 8), epochs=2), seed=0)
    assert enc.checksum() != before


def test_training_deterministic():
    x, y = separable()
    runs = []
    for _ in range(2):
        mlp = MLPClassifier(5, SMALL_CFG, seed=1)
        train_classifier(mlp, x, y, x, y, ClassifierConfig(hidden=(16, 8), epochs=10), seed=1)
        runs.append(mlp.checksum())
    assert runs[0] == runs[1]


# -- MC Dropout -----------------------------------------------------------------------------

def trained_mlp(p=0.2):
    x, y = separable()
    cfg = ClassifierConfig(hidden=(16, 8), dropout=p, epochs=20, batch_size=32)
    mlp = MLPClassifier(5, cfg, seed=0)
    train_classifier(mlp, x, y, cfg=cfg, seed=0)
    return mlp, x


def test_zero_dropout_has_zero_variance():
    mlp, x = trained_mlp(p=0.0)
    for T in (1, 7, 50):
        _, var = mc_predict(mlp, x, T)
        assert (var == 0).all()


def test_single_pass_variance_is_zero():
    mlp, x = trained_mlp()
    assert (mc_predict(mlp, x, 1)[1] == 0).all()


@settings(max_examples=20)
@given(st.integers(0, 2 ** 16), st.integers(2, 40))
def test_mean_and_variance_bounds(seed, T):
    r = np.random.default_rng(seed)
    mlp = MLPClassifier(4, ClassifierConfig(hidden=(8, 4), dropout=0.5), seed=seed)
    mlp.out.weight.data *= r.uniform(1, 50)
    mean, var = mc_predict(mlp, r.normal(size=(16, 4)) * 3, T, seed)
    assert ((0 <= mean) & (mean <= 1)).all()
    assert ((0 <= var) & (var <= 0.25)).all()


def test_mc_predict_deterministic_and_id_keyed():
    mlp, x = trained_mlp()
    a = mc_predict(mlp, x[:10], 16, seed=3, ids=np.arange(10) + 100)
    b = mc_predict(mlp, x[:10], 16, seed=3, ids=np.arange(10) + 100)
    assert_array_equal(a[0], b[0])
    # a sample's passes depend on its id, not on its position in the batch
    c = mc_predict(mlp, x[[3]], 16, seed=3, ids=np.array([103]))
    assert c[0][0] == pytest.approx(a[0][3], abs=1e-12)


def test_std_of_mean_scales_inverse_sqrt_T():
    mlp, x = trained_mlp()
    xs = x[:1]
    Ts = (16, 64, 256)
    sds = []
    for T in Ts:
        means = [mc_predict(mlp, xs, T, seed=s)[0][0] for s in range(300)]
        sds.append(np.std(means, ddof=1))
    slope = np.polyfit(np.log(Ts), np.log(sds), 1)[0]
    assert -0.6 <= slope <= -0.4, slope


# -- maps ---------------------------------------------------------------------------------

def raster(m=3, r=7, c=5, seed=0):
    data = np.random.default_rng(seed).normal(size=(m, r, c)).astype(np.float32)
    return MultiBandRaster(data, [f"b{i}" for i in range(m)], GeoTransform(0, 0, 1, -1))


def test_constant_model_uniform_map():
    mlp = MLPClassifier(3, ClassifierConfig(hidden=(4,)), seed=0)
    for p in mlp.parameters():
        p.data[...] = 0.0
    mlp.out.bias.data[...] = 0.7
    mlp.eval()
    pmap = predict_map(ProspectivityNet(mlp, None, 3), raster(), T=8)
    assert np.allclose(pmap.mean, 1 / (1 + math.exp(-0.7)), atol=1e-6)
    assert np.allclose(pmap.std, 0.0)


def test_stride_evaluates_ceil_grid():
    mlp = MLPClassifier(3, ClassifierConfig(hidden=(4,)), seed=0).eval()
    pmap = predict_map(ProspectivityNet(mlp, None, 3), raster(r=7, c=5), stride=2, T=4)
    assert pmap.evaluated.sum() == 4 * 3 == strided_ids(7, 5, 2).size
    assert np.isnan(pmap.mean[~pmap.evaluated]).all() and np.isfinite(pmap.mean[pmap.evaluated]).all()
    out = pmap.to_raster(GeoTransform(0, 0, 1, -1))
    assert out.band_names == ["mean", "std"] and (out.nodata_mask == ~pmap.evaluated).all()


def test_predict_map_bit_identical_on_repeat():
    mlp = MLPClassifier(3, ClassifierConfig(hidden=(4,)), seed=0).eval()
    net = ProspectivityNet(mlp, None, 3)
    a, b = predict_map(net, raster(), T=16, seed=2), predict_map(net, raster(), T=16, seed=2)
    assert a.mean.tobytes() == b.mean.tobytes() and a.std.tobytes() == b.std.tobytes()


def test_training_positives_score_above_map_median():
    cfg = RunConfig(seeds=(0,), synth=WorldSpec(rows=32, cols=32, n_layers=8, rule_layers=(0, 2, 4, 6),
                                                n_deposits=9))
    w = generate_world(cfg.synth)
    data = prepare(w.raster, w.records, cfg)
    cfg.pu.features = "raw"
    split = make_split(data, similarity_features(data, None, cfg), cfg, 0)
    ccfg = ClassifierConfig(hidden=(16, 8), epochs=100, patience=30, batch_size=16)
    net = ProspectivityNet(MLPClassifier(data.raster.bands, ccfg, 0), None)
    r = data.raster
    train_classifier(net, net.inputs(r, split.train_ids), split.train_y, net.inputs(r, split.val_ids),
                     split.val_y, ccfg, 0)
    pmap = predict_map(net, r, T=16)
    pos = np.unique(split.train_ids[split.train_y == 1])
    assert pmap.mean.reshape(-1)[pos].mean() > np.median(pmap.mean)
