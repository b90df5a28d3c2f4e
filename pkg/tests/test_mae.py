import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from skimage.metrics import structural_similarity

from prospectr.mae import (DivergenceError, MaeConfig, MaeModel, extract_features, holdout_split, mse_loss,
                           num_masked, patch_pixel_mask, pretrain, psnr, sample_mask, sample_masks, smoothed, ssim)
from prospectr.nn import ConfigError, ViTConfig, ViTEncoder
from prospectr.tensor import Tensor, default_dtype, grad_check, no_grad, rng_stream

ENC = ViTConfig(bands=2, window=8, patch=4, dim=16, depth=1, heads=2)


def tiny_cfg(**kw):
    base = dict(encoder=ENC, decoder_dim=16, decoder_depth=1, decoder_heads=2, epochs=2, batch_size=16,
                holdout=16)
    base.update(kw)
    return MaeConfig(**base)


# -- masking ----------------------------------------------------------------------

@pytest.mark.parametrize("P", range(4, 65))
def test_masked_count_exact(P):
    plan = sample_mask(P, 0.75, rng_stream(P))
    assert plan.masked.size == round(0.75 * P)
    assert plan.kept.size + plan.masked.size == P
    assert np.union1d(plan.kept, plan.masked).tolist() == list(range(P))


def test_default_keeps_four_of_sixteen():
    assert 16 - num_masked(16, 0.75) == 4


def test_half_mask_of_four():
    assert sample_mask(4, 0.5, rng_stream(0)).masked.size == 2


def test_same_seed_same_plan():
    a, b = sample_mask(16, 0.75, rng_stream(3)), sample_mask(16, 0.75, rng_stream(3))
    assert_array_equal(a.masked, b.masked)


def test_degenerate_ratio_rejected():
    with pytest.raises(ConfigError):
        num_masked(4, 0.1)
    with pytest.raises(ConfigError):
        sample_mask(4, 1.0, rng_stream(0))


def test_batched_masks_rows_are_partitions():
    keep, masked = sample_masks(8, 16, 0.75, rng_stream(1))
    assert keep.shape == (8, 4) and masked.shape == (8, 12)
    for k, m in zip(keep, masked):
        assert sorted(np.r_[k, m].tolist()) == list(range(16))


def test_patch_pixel_mask_layout():
    pix = patch_pixel_mask(np.array([[1]]), bands=2, window=4, patch=2)
    expected = np.zeros((4, 4), bool)
    expected[:2, 2:] = True
    assert_array_equal(pix[0, 0], expected)
    assert_array_equal(pix[0, 1], expected)


# -- model -----------------------------------------------------------------------

def test_encoder_sees_only_kept_patches(rng):
    m = MaeModel(tiny_cfg())
    keep, _ = sample_masks(3, m.num_patches, 0.75, rng_stream(0))
    assert m.encoder(rng.normal(size=(3, 2, 8, 8)).astype(np.float32), keep).shape[1] == keep.shape[1]
    assert m(rng.normal(size=(3, 2, 8, 8)).astype(np.float32), keep).shape == (3, 2, 8, 8)


def test_linear_autoencoder_can_reconstruct_exactly(rng):
    with default_dtype(np.float64):
        enc = ViTConfig(bands=1, window=4, patch=2, dim=4, depth=0, heads=1, final_norm=False)
        m = MaeModel(MaeConfig(encoder=enc, decoder_dim=4, decoder_depth=0, decoder_heads=1, decoder_norm=False))
        m.encoder.patch_embed.pos[...] = 0.0
        m.decoder_pos[...] = 0.0
        for lin in (m.encoder.patch_embed.proj, m.decoder_embed):
            lin.weight.data[...] = rng.normal(size=(4, 4))
            lin.bias.data[...] = 0.0
        chain = m.encoder.patch_embed.proj.weight.data @ m.decoder_embed.weight.data
        m.head.weight.data[...] = np.linalg.pinv(chain)
        m.head.bias.data[...] = 0.0
        x = rng.normal(size=(5, 1, 4, 4))
        out = m(x).data
    assert_allclose(out, x, atol=1e-10)


def test_mask_token_only_affects_masked_patches_without_decoder_attention(rng):
    m = MaeModel(tiny_cfg(decoder_depth=0))
    x = rng.normal(size=(2, 2, 8, 8)).astype(np.float32)
    keep, masked = sample_masks(2, 4, 0.5, rng_stream(0))
    with no_grad():
        before = m(x, keep).data
        m.mask_token.data += rng.normal(size=m.mask_token.shape).astype(np.float32)
        after = m(x, keep).data
    changed = patch_pixel_mask(masked, 2, 8, 4)
    assert not np.allclose(before[changed], after[changed])
    assert_array_equal(before[~changed], after[~changed])


def test_full_mae_grad_check_float64(rng):
    with default_dtype(np.float64):
        m = MaeModel(tiny_cfg(), seed=1)
        x = Tensor(rng.normal(size=(2, 2, 8, 8)))
        target = x.data.copy()  # grad_check perturbs x in place; the target must stay fixed
        keep, _ = sample_masks(2, 4, 0.5, rng_stream(1))
        rep = grad_check(lambda *a: mse_loss(m(x, keep), target), [x] + m.parameters(), eps=1e-6, tol=1e-6,
                         max_coords=6)
    assert rep.passed, rep


# -- loss and monitors ----------------------------------------------------------------

def test_mse_trivial_values():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 4)).astype(np.float32)
    assert mse_loss(Tensor(x), x).item() == 0.0
    assert mse_loss(Tensor(np.ones((2, 3, 4, 4))), np.zeros((2, 3, 4, 4))).item() == 1.0


def test_mse_matches_loop_oracle(rng):
    a, b = rng.normal(size=(3, 2, 4, 4)), rng.normal(size=(3, 2, 4, 4))
    with default_dtype(np.float64):
        got = mse_loss(Tensor(a), b).item()
    total = 0.0
    for n in range(3):
        for j in range(2):
            for r in range(4):
                for c in range(4):
                    total += (a[n, j, r, c] - b[n, j, r, c]) ** 2
    assert abs(got - total / a.size) < 1e-6


def test_masked_loss_uses_only_masked_pixels(rng):
    a, b = rng.normal(size=(1, 1, 4, 4)), rng.normal(size=(1, 1, 4, 4))
    pix = patch_pixel_mask(np.array([[0, 3]]), 1, 4, 2)
    with default_dtype(np.float64):
        got = mse_loss(Tensor(a), b, pix).item()
    assert got == pytest.approx(((a - b) ** 2)[pix].mean(), rel=1e-12)


def test_ssim_matches_skimage(rng):
    for trial in range(5):
        a = rng.normal(size=(16, 16))
        b = a + rng.normal(scale=0.5, size=(16, 16))
        rng_ = float(max(a.max(), b.max()) - min(a.min(), b.min()))
        ref = structural_similarity(a, b, data_range=rng_, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False)
        assert ssim(a, b, rng_) == pytest.approx(ref, abs=1e-9)


def test_ssim_identical_and_anticorrelated(rng):
    a = rng.normal(size=(16, 16))
    assert ssim(a, a, 4.0) == pytest.approx(1.0)
    # two-value checkerboard: local means vanish, so the structure term dominates for b = -a
    board = np.where((np.arange(16)[:, None] + np.arange(16)[None, :]) % 2 == 0, 1.0, -1.0)
    assert ssim(board, -board, 2.0) < 0


def test_ssim_symmetric(rng):
    a, b = rng.normal(size=(3, 16, 16)), rng.normal(size=(3, 16, 16))
    assert_allclose(ssim(a, b, 5.0), ssim(b, a, 5.0), atol=1e-9)


def test_psnr_closed_form_and_cap(rng):
    a = rng.random((8, 8))
    assert psnr(a, a + 0.1, 1.0) == pytest.approx(20.0)
    assert psnr(a, a, 1.0) == 100.0


def test_smoothed_moving_average():
    assert_allclose(smoothed([5, 4, 3, 2, 1, 0], 5), [3.0, 2.0])


def test_holdout_split_partition():
    hold, train = holdout_split(100, 256, 0)
    assert hold.size == 20 and np.intersect1d(hold, train).size == 0 and hold.size + train.size == 100


# -- training -------------------------------------------------------------------------

def test_zero_dataset_loss_vanishes():
    res = pretrain(np.zeros((256, 2, 8, 8), np.float32), tiny_cfg(lr=1e-2), seed=0)
    assert res.history[-1].loss < 1e-3
    assert res.history[-1].loss < res.history[0].loss


def test_pretraining_deterministic(rng):
    x = rng.normal(size=(64, 2, 8, 8)).astype(np.float32)
    a = pretrain(x, tiny_cfg(), seed=5)
    b = pretrain(x, tiny_cfg(), seed=5)
    assert a.model.checksum() == b.model.checksum()
    assert [h.loss for h in a.history] == [h.loss for h in b.history]


def test_callback_and_best_state(rng):
    x = rng.normal(size=(64, 2, 8, 8)).astype(np.float32)
    seen = []
    res = pretrain(x, tiny_cfg(epochs=3), seed=0, on_epoch=lambda s, m, r: seen.append((s.epoch, r.shape)))
    assert [e for e, _ in seen] == [1, 2, 3] and seen[0][1] == (12, 2, 8, 8)
    assert res.best_epoch == int(np.argmax([h.psnr for h in res.history])) + 1


def test_nan_input_diverges():
    x = np.full((32, 2, 8, 8), np.nan, np.float32)
    with pytest.raises(DivergenceError):
        pretrain(x, tiny_cfg(epochs=1), seed=0)


def test_wrong_window_shape_rejected(rng):
    with pytest.raises(Exception):
        pretrain(rng.normal(size=(8, 3, 8, 8)).astype(np.float32), tiny_cfg(), seed=0)


# -- features -------------------------------------------------------------------------

def test_feature_properties(rng):
    enc = ViTEncoder(ENC, 0)
    x = rng.normal(size=(3, 2, 8, 8)).astype(np.float32)
    x[1] = x[0]
    f = extract_features(enc, x)
    assert f.shape == (3, 16)
    assert_array_equal(f[0], f[1])
    assert not np.allclose(extract_features(enc, x[:, ::-1].copy())[0], f[0])


def test_default_feature_dimension():
    enc = ViTEncoder(ViTConfig(), 0)
    assert extract_features(enc, np.zeros((1, 24, 16, 16), np.float32)).shape == (1, 256)
