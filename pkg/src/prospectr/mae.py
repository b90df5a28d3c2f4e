"""Masked autoencoder pretraining of the ViT encoder, with SSIM/PSNR monitors.

The encoder only sees the kept patches.  A light decoder receives the kept
tokens plus a learned mask token at every masked position (both carrying
fixed position embeddings) and regresses the pixels of every patch.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

from .nn import (Adam, ConfigError, LayerNorm, Linear, Module, Parameter, TransformerBlock, ViTConfig,
                 ViTEncoder, cosine_lr, sincos_pos_embed_2d, trunc_normal, unpatchify)
from .tensor import ShapeError, Tensor, no_grad, rng_stream, scatter

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class MaeConfig:
    encoder: ViTConfig = field(default_factory=ViTConfig)
    decoder_dim: int = 128
    decoder_depth: int = 2
    decoder_heads: int = 4
    decoder_norm: bool = True
    mask_ratio: float = 0.75
    loss_on: str = "all"
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    min_lr: float = 0.0
    weight_decay: float = 0.0
    holdout: int = 256
    sample_stride: int = 1
    recon_every: int = 10

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = ViTConfig(**self.encoder)
        if self.loss_on not in ("all", "masked"):
            raise ConfigError(f"loss_on must be 'all' or 'masked', got {self.loss_on!r}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must be in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.sample_stride < 1:
            raise ConfigError("batch_size and sample_stride must be >= 1, epochs >= 0")


# -- masking -------------------------------------------------------------------

@dataclass(frozen=True)
class MaskPlan:
    num_patches: int
    kept: np.ndarray
    masked: np.ndarray


def num_masked(num_patches: int, ratio: float) -> int:
    n = int(round(ratio * num_patches))
    if n <= 0 or n >= num_patches:
        raise ConfigError(f"mask ratio {ratio} masks {n} of {num_patches} patches; need 0 < n < P")
    return n


def sample_mask(num_patches: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    if not 0.0 < ratio < 1.0:
        raise ConfigError("mask ratio must be in (0, 1)")
    n = num_masked(num_patches, ratio)
    perm = rng.permutation(num_patches)
    return MaskPlan(num_patches, np.sort(perm[n:]), np.sort(perm[:n]))


def sample_masks(batch: int, num_patches: int, ratio: float, rng: np.random.Generator):
    """Batched plans as index arrays: kept [B, P - n] and masked [B, n], each row sorted."""
    n = num_masked(num_patches, ratio)
    perm = np.argsort(rng.random((batch, num_patches)), axis=1)
    return np.sort(perm[:, n:], axis=1), np.sort(perm[:, :n], axis=1)


def patch_pixel_mask(masked: np.ndarray, bands: int, window: int, patch: int) -> np.ndarray:
    """Boolean [B, m, w, w] marking the pixels of the masked patches."""
    b = masked.shape[0]
    g = window // patch
    tok = np.zeros((b, g * g), dtype=bool)
    tok[np.arange(b)[:, None], masked] = True
    pix = np.repeat(np.repeat(tok.reshape(b, g, g), patch, axis=1), patch, axis=2)
    return np.broadcast_to(pix[:, None], (b, bands, window, window))


# -- model -------------------------------------------------------------------

class MaeModel(Module):
    def __init__(self, cfg: MaeConfig | None = None, seed: int = 0):
        cfg = cfg or MaeConfig()
        self.cfg = cfg
        enc = cfg.encoder
        self.encoder = ViTEncoder(enc, seed)
        rng = rng_stream(seed, "init", "decoder")
        self.decoder_embed = Linear(enc.dim, cfg.decoder_dim, rng)
        self.mask_token = Parameter(trunc_normal(rng, (cfg.decoder_dim,)))
        self.decoder_pos = sincos_pos_embed_2d(cfg.decoder_dim, enc.window // enc.patch).astype(
            self.mask_token.dtype)
        self.decoder_blocks = [TransformerBlock(cfg.decoder_dim, cfg.decoder_heads, enc.mlp_ratio, rng)
                               for _ in range(cfg.decoder_depth)]
        self.decoder_norm = LayerNorm(cfg.decoder_dim) if cfg.decoder_norm else None
        self.head = Linear(cfg.decoder_dim, enc.patch * enc.patch * enc.bands, rng)

    @property
    def num_patches(self) -> int:
        return self.encoder.num_patches

    def forward(self, x, keep_idx: np.ndarray | None = None) -> Tensor:
        """Reconstruct [B, m, w, w] from the patches listed in ``keep_idx`` (all if None)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        b, p = x.shape[0], self.num_patches
        if keep_idx is None:
            keep_idx = np.broadcast_to(np.arange(p), (b, p))
        keep_idx = np.asarray(keep_idx, dtype=np.int64)
        latent = self.encoder(x, keep_idx)
        assert latent.shape[1] == keep_idx.shape[1], "encoder must only see the kept patches"
        y = scatter(self.decoder_embed(latent), keep_idx, p)
        is_masked = np.ones((b, p, 1), dtype=y.dtype)
        is_masked[np.arange(b)[:, None], keep_idx] = 0.0
        y = y + self.mask_token * is_masked + self.decoder_pos
        for blk in self.decoder_blocks:
            y = blk(y)
        if self.decoder_norm is not None:
            y = self.decoder_norm(y)
        enc = self.cfg.encoder
        return unpatchify(self.head(y), enc.bands, enc.patch)


def mse_loss(pred: Tensor, target, pixel_mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error over every element, or over ``pixel_mask`` when given."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    sq = diff * diff
    if pixel_mask is None:
        return sq.mean()
    w = np.asarray(pixel_mask, dtype=pred.dtype)
    return (sq * w).sum() * (1.0 / max(1.0, float(w.sum())))


# -- monitors ------------------------------------------------------------------

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def ssim(a: np.ndarray, b: np.ndarray, data_range: float) -> np.ndarray:
    """Gaussian-window SSIM of [..., H, W] images, averaged over the last two axes.

    Population covariances, window sigma 1.5 truncated at 3.5 sigma and a
    border crop of the window radius.  Returns one value per leading index.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("ssim inputs must have equal shapes")
    sigma = [0.0] * (a.ndim - 2) + [SSIM_SIGMA, SSIM_SIGMA]

    def blur(z):
        return ndimage.gaussian_filter(z, sigma, truncate=SSIM_TRUNCATE, mode="reflect")
    ux, uy = blur(a), blur(b)
    vx = blur(a * a) - ux * ux
    vy = blur(b * b) - uy * uy
    vxy = blur(a * b) - ux * uy
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    pad = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    if min(a.shape[-2:]) <= 2 * pad:
        raise ShapeError(f"images must be larger than {2 * pad} pixels per side for SSIM")
    return s[..., pad:-pad, pad:-pad].mean(axis=(-2, -1))


PSNR_CAP = 100.0


def psnr(a: np.ndarray, b: np.ndarray, peak: float) -> float:
    """10 log10(peak^2 / MSE), capped at 100 dB when MSE < peak^2 * 1e-10."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse < peak * peak * 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(peak * peak / mse)


# -- pretraining -------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    loss: float
    ssim: float
    psnr: float


@dataclass
class PretrainResult:
    model: MaeModel
    history: list[EpochStats]
    best_epoch: int
    holdout_ids: np.ndarray


def reconstruct(model: MaeModel, windows: np.ndarray, keep_idx: np.ndarray, batch_size: int = 128) -> np.ndarray:
    was = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for s in range(0, len(windows), batch_size):
                out.append(model(windows[s:s + batch_size], keep_idx[s:s + batch_size]).data)
    finally:
        model.train(was)
    return np.concatenate(out) if out else np.zeros_like(windows)


def evaluate_reconstruction(model: MaeModel, windows: np.ndarray, keep_idx: np.ndarray, peak: float):
    recon = reconstruct(model, windows, keep_idx)
    s = float(ssim(recon, windows, peak).mean()) if min(windows.shape[-2:]) > 10 else float("nan")
    return recon, s, psnr(recon, windows, peak)


def smoothed(values, window: int = 5) -> np.ndarray:
    """Trailing moving average (valid part only)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return v.copy()
    return np.convolve(v, np.ones(window) / window, mode="valid")


def holdout_split(n: int, holdout: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Sorted (held-out, training) indices; at most a fifth of the windows is held out."""
    n_hold = min(holdout, n // 5) if n > 1 else 0
    perm = rng_stream(seed, "mae", "holdout").permutation(n)
    return np.sort(perm[:n_hold]), np.sort(perm[n_hold:])


def pretrain(windows: np.ndarray, cfg: MaeConfig | None = None, seed: int = 0,
             on_epoch: Callable[[EpochStats, MaeModel, np.ndarray], None] | None = None) -> PretrainResult:
    """Train an MAE on unlabeled windows [N, m, w, w].

    A fixed held-out subset with fixed masks is reconstructed after every
    epoch; the parameters of the best-PSNR epoch are restored at the end.
    """
    cfg = cfg or MaeConfig()
    windows = np.ascontiguousarray(windows, dtype=np.float32)
    if windows.ndim != 4 or len(windows) == 0:
        raise ValueError("pretraining needs a non-empty [N, m, w, w] window stack")
    enc = cfg.encoder
    if windows.shape[1:] != (enc.bands, enc.window, enc.window):
        raise ShapeError(f"windows {windows.shape[1:]} do not match encoder config")

    model = MaeModel(cfg, seed)
    hold_ids, train_ids = holdout_split(len(windows), cfg.holdout, seed)
    hold = windows[hold_ids] if hold_ids.size else windows[:1]
    hold_keep, _ = sample_masks(len(hold), model.num_patches, cfg.mask_ratio,
                                rng_stream(seed, "mae", "holdout-mask"))
    peak = float(hold.max() - hold.min()) or 1.0

    opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train_ids) / cfg.batch_size)
    total = max(1, steps_per_epoch * cfg.epochs)
    history: list[EpochStats] = []
    best_psnr, best_epoch, best_state = -math.inf, 0, model.state_dict()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = train_ids[rng_stream(seed, "mae", "epoch", epoch).permutation(len(train_ids))]
        mask_rng = rng_stream(seed, "mae", "mask", epoch)
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            batch = windows[order[s:s + cfg.batch_size]]
            keep, masked = sample_masks(len(batch), model.num_patches, cfg.mask_ratio, mask_rng)
            pixel_mask = (patch_pixel_mask(masked, enc.bands, enc.window, enc.patch)
                          if cfg.loss_on == "masked" else None)
            loss = mse_loss(model(batch, keep), batch, pixel_mask)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step(cosine_lr(cfg.lr, step, total, floor=cfg.min_lr))
            losses.append(value * len(batch))
            step += 1
        recon, s_val, p_val = evaluate_reconstruction(model, hold, hold_keep, peak)
        stats = EpochStats(epoch, float(np.sum(losses) / max(1, len(order))), s_val, p_val)
        history.append(stats)
        log.info("epoch %d loss %.5f ssim %.4f psnr %.2f", epoch, stats.loss, stats.ssim, stats.psnr)
        if p_val > best_psnr:
            best_psnr, best_epoch, best_state = p_val, epoch, model.state_dict()
        if on_epoch is not None:
            on_epoch(stats, model, recon)
    model.load_state_dict(best_state)
    model.eval()
    return PretrainResult(model, history, best_epoch, hold_ids)


def extract_features(encoder: ViTEncoder, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Mean-pooled encoder tokens over the full patch sequence, eval mode, [N, D]."""
    was = encoder.training
    encoder.eval()
    out = []
    try:
        with no_grad():
            for s in range(0, len(windows), batch_size):
                out.append(encoder.features(np.ascontiguousarray(windows[s:s + batch_size])).data)
    finally:
        encoder.train(was)
    if not out:
        return np.zeros((0, encoder.cfg.dim), dtype=np.float32)
    return np.concatenate(out)
