"""Deterministic PNG rendering of map rasters with fixed colour tables."""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

STYLES = ("heat_over_gray", "signed_green", "quantile5", "gray")
NAN_RGB = np.array([255, 255, 255], dtype=np.uint8)


def _lut(stops: list[tuple[float, tuple[int, int, int]]]) -> np.ndarray:
    pos = np.array([s[0] for s in stops])
    cols = np.array([s[1] for s in stops], dtype=np.float64)
    t = np.linspace(0.0, 1.0, 256)
    return np.stack([np.interp(t, pos, cols[:, c]) for c in range(3)], axis=1).round().astype(np.uint8)


HEAT = _lut([(0.0, (128, 0, 0)), (0.35, (220, 30, 0)), (0.7, (255, 160, 0)), (1.0, (255, 255, 100))])
GRAY = _lut([(0.0, (20, 20, 20)), (1.0, (235, 235, 235))])
SIGNED_GREEN = _lut([(0.0, (118, 42, 131)), (0.5, (247, 247, 247)), (1.0, (0, 104, 55))])
QUANTILE5 = np.array([[26, 150, 65], [166, 217, 106], [255, 255, 191], [253, 174, 97], [215, 25, 28]],
                     dtype=np.uint8)


class StyleError(ValueError):
    pass


def normalize01(values: np.ndarray) -> np.ndarray:
    """Affine map of the finite range onto [0, 1]; a constant raster maps to 0."""
    v = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(v)
    if not finite.any():
        return np.zeros_like(v)
    lo, hi = v[finite].min(), v[finite].max()
    out = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    return np.where(finite, out, 0.0)


def lut_index(t: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(t * 255), 0, 255).astype(np.int64)


def colorize(values: np.ndarray, style: str, underlay: np.ndarray | None = None) -> np.ndarray:
    """RGB uint8 [r, c, 3]; non-finite pixels are white."""
    v = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(v)
    if style == "gray":
        rgb = GRAY[lut_index(normalize01(v))]
    elif style == "heat_over_gray":
        t = normalize01(v)
        heat = HEAT[lut_index(t)].astype(np.float64)
        gray = GRAY[lut_index(normalize01(underlay))].astype(np.float64) if underlay is not None else heat
        alpha = (0.35 + 0.65 * t)[..., None]
        rgb = np.rint(alpha * heat + (1.0 - alpha) * gray).astype(np.uint8)
    elif style == "signed_green":
        m = np.abs(v[finite]).max() if finite.any() else 0.0
        t = np.full(v.shape, 0.5) if m == 0 else 0.5 + 0.5 * np.where(finite, v, 0.0) / m
        rgb = SIGNED_GREEN[lut_index(t)]
    elif style == "quantile5":
        edges = np.quantile(v[finite], [0.2, 0.4, 0.6, 0.8]) if finite.any() else np.zeros(4)
        bins = np.searchsorted(edges, np.where(finite, v, -np.inf), side="right")
        if finite.any() and v[finite].min() == v[finite].max():
            bins = np.zeros(v.shape, dtype=np.int64)
        rgb = QUANTILE5[np.clip(bins, 0, 4)]
    else:
        raise StyleError(f"unknown style {style!r}; choose from {STYLES}")
    rgb = np.array(rgb, dtype=np.uint8)
    rgb[~finite] = NAN_RGB
    return rgb


def png_bytes(rgb: np.ndarray, scale: int = 1) -> bytes:
    if scale > 1:
        rgb = np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(rgb)).save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def render_png(values: np.ndarray, path, style: str, underlay: np.ndarray | None = None, scale: int = 4) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(png_bytes(colorize(values, style, underlay), scale))
    return path


def tile_grid(images: list[np.ndarray], ncols: int, pad: int = 1) -> np.ndarray:
    """Arrange equal-sized 2-D arrays in a grid separated by NaN gutters."""
    h, w = images[0].shape
    nrows = -(-len(images) // ncols)
    grid = np.full((nrows * (h + pad) - pad, ncols * (w + pad) - pad), np.nan)
    for k, img in enumerate(images):
        r, c = divmod(k, ncols)
        grid[r * (h + pad): r * (h + pad) + h, c * (w + pad): c * (w + pad) + w] = img
    return grid


def reconstruction_grid(original: np.ndarray, recon: np.ndarray, path, bands: int = 6, samples: int = 4) -> Path:
    """Rows alternate original and reconstructed windows; columns are bands."""
    rows = []
    for s in range(min(samples, len(original))):
        rows += [original[s, b] for b in range(min(bands, original.shape[1]))]
        rows += [recon[s, b] for b in range(min(bands, original.shape[1]))]
    return render_png(tile_grid(rows, min(bands, original.shape[1])), path, "gray", scale=4)
