"""Integrated Gradients attributions and per-band attribution rasters.

IG_j = (x_j - b_j) * mean_k dF/dx_j at b + (k - 1/2)/steps * (x - b), the
midpoint rule for the path integral from baseline b to input x.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .clf import ProspectivityNet
from .nn import Dropout
from .raster import MultiBandRaster
from .tensor import Tensor, no_grad, rng_stream

ModelFn = Callable[[Tensor], Tensor]


class NumericError(FloatingPointError):
    pass


@dataclass
class Attribution:
    scores: np.ndarray
    baseline: np.ndarray
    steps: int
    f_input: float
    f_baseline: float
    completeness_gap: float = float("nan")

    @property
    def relative_gap(self) -> float:
        delta = abs(self.f_input - self.f_baseline)
        return self.completeness_gap / delta if delta > 0 else float("inf") if self.completeness_gap else 0.0

    def to_json(self) -> str:
        return json.dumps({"scores": self.scores.tolist(), "steps": self.steps, "f_input": self.f_input,
                           "f_baseline": self.f_baseline, "completeness_gap": self.completeness_gap,
                           "baseline_sha256": hashlib.sha256(np.ascontiguousarray(self.baseline).tobytes()).hexdigest()})


def midpoint_alphas(steps: int) -> np.ndarray:
    return (np.arange(1, steps + 1) - 0.5) / steps


def _evaluate(f: ModelFn, x: np.ndarray, chunk: int) -> np.ndarray:
    with no_grad():
        return np.concatenate([np.asarray(f(Tensor(x[s:s + chunk])).data, np.float64).reshape(-1)
                               for s in range(0, len(x), chunk)])


def integrated_gradients_batch(f: ModelFn, x: np.ndarray, baseline: np.ndarray | None = None, steps: int = 64,
                               chunk: int = 256) -> list[Attribution]:
    """IG for each sample of ``x`` [N, ...]; ``f`` maps a batch to one scalar per sample."""
    if steps < 8:
        raise ValueError("IG needs at least 8 steps")
    x = np.asarray(x)
    b = np.zeros_like(x) if baseline is None else np.broadcast_to(np.asarray(baseline, x.dtype), x.shape)
    n = len(x)
    alphas = midpoint_alphas(steps).astype(x.dtype)
    delta = x - b
    grads = np.zeros(x.shape, dtype=np.float64)
    total = n * steps
    for s in range(0, total, chunk):
        flat = np.arange(s, min(total, s + chunk))
        i, k = np.divmod(flat, steps)
        shape = (-1,) + (1,) * (x.ndim - 1)
        pts = Tensor(b[i] + alphas[k].reshape(shape) * delta[i], requires_grad=True)
        out = f(pts)
        out.sum().backward()
        g = pts.grad
        bad = ~np.isfinite(g.reshape(len(flat), -1)).all(axis=1)
        if bad.any():
            j = int(np.flatnonzero(bad)[0])
            raise NumericError(f"non-finite gradient for sample {int(i[j])} at path step {int(k[j]) + 1}")
        np.add.at(grads, i, g.astype(np.float64))
    scores = grads / steps * delta
    fx = _evaluate(f, x, chunk)
    fb = _evaluate(f, np.ascontiguousarray(b), chunk)
    out = []
    for j in range(n):
        a = Attribution(scores[j], np.array(b[j]), steps, float(fx[j]), float(fb[j]))
        a.completeness_gap = abs(float(scores[j].sum()) - (a.f_input - a.f_baseline))
        out.append(a)
    return out


def integrated_gradients(f: ModelFn, x: np.ndarray, baseline: np.ndarray | None = None, steps: int = 64,
                         chunk: int = 256) -> Attribution:
    """IG of a single sample; the default baseline is the zero tensor."""
    x = np.asarray(x)
    return integrated_gradients_batch(f, x[None], None if baseline is None else np.asarray(baseline)[None],
                                      steps, chunk)[0]


def completeness_check(attr: Attribution, f: ModelFn, x: np.ndarray, baseline: np.ndarray | None = None) -> float:
    """|sum IG - (F(x) - F(b))|, recomputing both endpoints; stored on ``attr``."""
    x = np.asarray(x)
    b = np.zeros_like(x) if baseline is None else np.asarray(baseline, x.dtype)
    fx, fb = _evaluate(f, np.stack([x, b]), 2)
    attr.f_input, attr.f_baseline = float(fx), float(fb)
    attr.completeness_gap = abs(float(attr.scores.sum()) - (attr.f_input - attr.f_baseline))
    return attr.completeness_gap


def explain_fn(net: ProspectivityNet, dropout_seed: int | None = None) -> ModelFn:
    """Deterministic F for attribution: dropout off, or one fixed mask per layer shared by every path point."""
    net.eval()
    drops = [d for d in net.mlp.modules() if isinstance(d, Dropout)]
    if dropout_seed is None:
        return net

    widths = [d_prev.d_out for d_prev in net.mlp.layers if hasattr(d_prev, "d_out")]
    masks = [rng_stream(dropout_seed, "xai", k).random(wd) >= d.p for k, (d, wd) in enumerate(zip(drops, widths))]

    def f(x: Tensor) -> Tensor:
        for d, m in zip(drops, masks):
            d.mc = True
            d.mask_override = np.broadcast_to(m, (x.shape[0], m.size))
        try:
            return net(x)
        finally:
            for d in drops:
                d.mc = False
                d.mask_override = None
    return f


def attribution_maps(net: ProspectivityNet, raster: MultiBandRaster, ids: np.ndarray, steps: int = 64,
                     chunk: int = 256, dropout_seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Signed per-band attribution rasters [m, r, c] (NaN where not evaluated) and per-pixel gaps.

    Each band's value at a pixel is the sum of that band's IG scores over
    the sample's spatial footprint.
    """
    ids = np.asarray(ids, dtype=np.int64)
    f = explain_fn(net, dropout_seed)
    maps = np.full((raster.bands, raster.rows * raster.cols), np.nan, np.float32)
    gaps = np.full(raster.rows * raster.cols, np.nan, np.float32)
    per = max(1, chunk // steps)
    for s in range(0, ids.size, per):
        sub = ids[s:s + per]
        attrs = integrated_gradients_batch(f, net.inputs(raster, sub), None, steps, chunk)
        for pid, a in zip(sub, attrs):
            band_scores = a.scores.reshape(raster.bands, -1).sum(axis=1)
            maps[:, pid] = band_scores
            gaps[pid] = a.completeness_gap
    return maps.reshape(raster.bands, raster.rows, raster.cols), gaps.reshape(raster.rows, raster.cols)


def attribution_map(net: ProspectivityNet, raster: MultiBandRaster, band: int, ids: np.ndarray,
                    steps: int = 64, chunk: int = 256) -> np.ndarray:
    if not 0 <= band < raster.bands:
        raise IndexError(f"band {band} out of range for {raster.bands} bands")
    return attribution_maps(net, raster, ids, steps, chunk)[0][band]
