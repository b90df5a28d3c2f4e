"""Prospectivity classifier: frozen encoder features -> PReLU/BatchNorm/Dropout MLP.

Training minimises clamped binary cross-entropy on labeled samples only.
Inference keeps dropout active and summarises T stochastic passes by their
mean and unbiased variance (MC Dropout).  Each sample's dropout masks come
from a stream keyed by (seed, sample id), so results do not depend on batch
composition or order.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .metrics import ConfusionCounts, f1
from .nn import Adam, BatchNorm1d, ConfigError, Dropout, Linear, Module, PReLU, ViTEncoder
from .raster import MultiBandRaster, extract_windows
from .tensor import ContractError, Tensor, no_grad, rng_stream, sigmoid

log = logging.getLogger(__name__)

BCE_CLAMP = 1e-7


@dataclass
class ClassifierConfig:
    hidden: tuple[int, ...] = (128, 32)
    dropout: float = 0.2
    epochs: int = 200
    patience: int = 20
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 64
    mc_passes: int = 50
    threshold: float = 0.5

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.mc_passes < 1 or self.batch_size < 2 or self.epochs < 0 or self.patience < 1:
            raise ConfigError("mc_passes >= 1, batch_size >= 2, epochs >= 0 and patience >= 1 are required")


class MLPClassifier(Module):
    """[Linear -> BatchNorm -> PReLU -> Dropout] per hidden width, then Linear -> sigmoid."""

    def __init__(self, d_in: int, cfg: ClassifierConfig | None = None, seed: int = 0):
        cfg = cfg or ClassifierConfig()
        rng = rng_stream(seed, "init", "mlp")
        self.d_in = d_in
        self.layers = []
        width = d_in
        for h in cfg.hidden:
            self.layers += [Linear(width, h, rng), BatchNorm1d(h), PReLU(), Dropout(cfg.dropout, seed)]
            width = h
        self.out = Linear(width, 1, rng)

    @property
    def dropouts(self) -> list[Dropout]:
        return [m for m in self.layers if isinstance(m, Dropout)]

    def example_input(self) -> np.ndarray:
        return np.zeros((1, self.d_in), dtype=self.out.weight.dtype)

    def logits(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        for layer in self.layers:
            x = layer(x)
        return self.out(x).reshape(x.shape[0])

    def forward(self, x) -> Tensor:
        return sigmoid(self.logits(x))


class ProspectivityNet(Module):
    """F = MLP(features(x')).  Without an encoder the features are the raw center pixels."""

    def __init__(self, mlp: MLPClassifier, encoder: ViTEncoder | None = None, window: int = 16,
                 frozen: bool = True):
        self.mlp = mlp
        self.encoder = encoder
        self.window = encoder.cfg.window if encoder is not None else window
        self.frozen = frozen and encoder is not None
        if self.frozen:
            encoder.requires_grad_(False)

    def train(self, mode: bool = True) -> "ProspectivityNet":
        super().train(mode)
        if self.frozen:
            self.encoder.train(False)
        return self

    def inputs(self, raster: MultiBandRaster, ids: np.ndarray) -> np.ndarray:
        """Model inputs for flat pixel ids: windows [N, m, w, w], or center pixels [N, m] without encoder."""
        ids = np.asarray(ids, dtype=np.int64)
        if self.encoder is None:
            data = np.where(raster.nodata_mask, 0.0, raster.data).reshape(raster.bands, -1)
            return np.ascontiguousarray(data[:, ids].T, dtype=np.float32)
        return extract_windows(raster, ids, self.window)

    def features(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return self.encoder.features(x) if self.encoder is not None else x

    def encode(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Features as an array, computed without gradient tracking in batches."""
        with no_grad():
            if self.encoder is None:
                return np.asarray(x, dtype=np.float32)
            was = self.encoder.training
            self.encoder.eval()
            try:
                parts = [self.encoder.features(x[s:s + batch_size]).data for s in range(0, len(x), batch_size)]
            finally:
                self.encoder.train(was)
        return np.concatenate(parts) if parts else np.zeros((0, self.encoder.cfg.dim), np.float32)

    def forward(self, x) -> Tensor:
        return self.mlp(self.features(x))

    def example_input(self) -> np.ndarray:
        if self.encoder is not None:
            return self.encoder.example_input()
        return np.zeros((1, self.mlp.d_in), dtype=self.mlp.out.weight.dtype)


def bce_loss(pred: Tensor, target) -> Tensor:
    """-mean[y log p + (1 - y) log(1 - p)] with p clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype).reshape(pred.shape)
    p = pred.clip(BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(p.log() * y + (1.0 - p).log() * (1.0 - y)).mean()


@dataclass
class TrainResult:
    model: Module
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_f1: float = float("nan")


def _predict_eval(model: Module, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    was = model.training
    model.eval()
    try:
        with no_grad():
            out = [model(x[s:s + batch_size]).data for s in range(0, len(x), batch_size)]
    finally:
        model.train(was)
    return np.concatenate(out) if out else np.zeros(0, np.float32)


def train_classifier(model: Module, x_train: np.ndarray, y_train: np.ndarray,
                     x_val: np.ndarray | None = None, y_val: np.ndarray | None = None,
                     cfg: ClassifierConfig | None = None, seed: int = 0) -> TrainResult:
    """Minibatch BCE training with early stopping on validation F1.

    ``model`` is an :class:`MLPClassifier` fed features, or a
    :class:`ProspectivityNet` fed its inputs.  A frozen encoder is run once
    up front and only the MLP is optimised.
    """
    cfg = cfg or ClassifierConfig()
    y_train = np.asarray(y_train, dtype=np.float32)
    if len(x_train) == 0 or len(x_train) != len(y_train):
        raise ContractError("training needs a non-empty labeled set with one label per sample")
    target, xt, xv = model, np.asarray(x_train), None if x_val is None else np.asarray(x_val)
    if isinstance(model, ProspectivityNet) and model.frozen:
        target, xt = model.mlp, model.encode(xt)
        xv = None if xv is None else model.encode(xv)
    for k, d in enumerate(d for d in target.modules() if isinstance(d, Dropout)):
        d.reseed(seed, "train", k)
    result = TrainResult(model)
    if cfg.epochs == 0:
        return result
    has_val = xv is not None and len(xv) > 0
    opt = Adam(target.parameters(trainable_only=True), lr=cfg.lr, weight_decay=cfg.weight_decay)
    best_f1, best_state, since = -math.inf, target.state_dict(), 0
    n = len(xt)
    for epoch in range(1, cfg.epochs + 1):
        target.train()
        if isinstance(model, ProspectivityNet):
            model.train()
        order = rng_stream(seed, "clf", "epoch", epoch).permutation(n)
        total, seen = 0.0, 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            if idx.size < 2:
                continue  # BatchNorm needs two samples
            loss = bce_loss(target(xt[idx]), y_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * idx.size
            seen += idx.size
        row = {"epoch": epoch, "loss": total / max(1, seen)}
        if has_val:
            scores = _predict_eval(target, xv)
            c = ConfusionCounts.from_scores(scores, y_val, cfg.threshold)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                row["val_f1"] = f1(c)
            if row["val_f1"] > best_f1:
                best_f1, best_state, since = row["val_f1"], target.state_dict(), 0
                result.best_epoch = epoch
            else:
                since += 1
        result.history.append(row)
        if has_val and since >= cfg.patience:
            break
    if has_val:
        target.load_state_dict(best_state)
        result.best_val_f1 = best_f1
    else:
        result.best_epoch = cfg.epochs
    target.eval()
    if isinstance(model, ProspectivityNet):
        model.eval()
    return result


# -- MC Dropout inference --------------------------------------------------------

def _mc_masks(ids: np.ndarray, T: int, width: int, p: float, seed: int, layer: int) -> np.ndarray:
    rows = [rng_stream(seed, "mc", int(i), layer).random((T, width)) >= p for i in ids]
    return np.concatenate(rows) if rows else np.zeros((0, width), bool)


def mc_predict(mlp: MLPClassifier, features: np.ndarray, T: int = 50, seed: int = 0,
               ids: np.ndarray | None = None, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Mean and unbiased variance of T dropout-active passes per sample.

    BatchNorm uses running statistics.  ``ids`` key the per-sample dropout
    streams (defaults to row positions).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    features = np.asarray(features, dtype=np.float32)
    n = len(features)
    ids = np.arange(n) if ids is None else np.asarray(ids, dtype=np.int64)
    drops = mlp.dropouts
    stochastic = T > 1 and any(d.p > 0 for d in drops)
    if not stochastic:
        mean = _predict_eval(mlp, features)
        return mean.astype(np.float64), np.zeros(n)
    # every Dropout follows a Linear -> BatchNorm -> PReLU chain of the same width
    widths = [lay.d_out for lay in mlp.layers if isinstance(lay, Linear)]
    was = mlp.training
    mlp.eval()
    for d in drops:
        d.mc = True
    mean, var = np.empty(n), np.empty(n)
    try:
        with no_grad():
            for s in range(0, n, batch_size):
                fb, ib = features[s:s + batch_size], ids[s:s + batch_size]
                for k, (d, width) in enumerate(zip(drops, widths)):
                    d.mask_override = _mc_masks(ib, T, width, d.p, seed, k)
                y = mlp(np.repeat(fb, T, axis=0)).data.astype(np.float64).reshape(len(fb), T)
                mean[s:s + len(fb)] = y.mean(axis=1)
                var[s:s + len(fb)] = y.var(axis=1, ddof=1)
    finally:
        for d in drops:
            d.mc = False
            d.mask_override = None
        mlp.train(was)
    return mean, var


@dataclass
class ProspectivityMap:
    mean: np.ndarray
    std: np.ndarray
    evaluated: np.ndarray

    def to_raster(self, transform) -> MultiBandRaster:
        return MultiBandRaster(np.stack([self.mean, self.std]).astype(np.float32), ["mean", "std"], transform,
                               ~self.evaluated)


def strided_ids(rows: int, cols: int, stride: int = 1) -> np.ndarray:
    r, c = np.meshgrid(np.arange(0, rows, stride), np.arange(0, cols, stride), indexing="ij")
    return (r * cols + c).reshape(-1)


def predict_map(net: ProspectivityNet, raster: MultiBandRaster, stride: int = 1, T: int = 50, seed: int = 0,
                batch_size: int = 512, features: np.ndarray | None = None) -> ProspectivityMap:
    """MC Dropout mean/std for every ``stride``-th pixel; the rest are NaN.

    ``features`` may hold precomputed network features for every pixel
    (row-major), which skips the encoder.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ids = strided_ids(raster.rows, raster.cols, stride)
    mean = np.full(raster.rows * raster.cols, np.nan, np.float32)
    std = np.full(raster.rows * raster.cols, np.nan, np.float32)
    for s in range(0, ids.size, batch_size):
        chunk = ids[s:s + batch_size]
        feats = features[chunk] if features is not None else net.encode(net.inputs(raster, chunk))
        mu, var = mc_predict(net.mlp, feats, T, seed, chunk)
        mean[chunk] = mu
        std[chunk] = np.sqrt(var)
    evaluated = np.zeros(raster.rows * raster.cols, bool)
    evaluated[ids] = True
    shape = (raster.rows, raster.cols)
    return ProspectivityMap(mean.reshape(shape), std.reshape(shape), evaluated.reshape(shape))
