"""Per-band raster cleanup: Tukey fences, IDW imputation, smoothing, z-scores.

Missing values are NaN throughout.  Each stage is a pure function of one
band; ``run_pipeline`` chains them over every band of a raster.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .raster import MultiBandRaster

log = logging.getLogger(__name__)


class EmptyBandError(ValueError):
    pass


class ConstantBandError(ValueError):
    pass


@dataclass
class PreprocessConfig:
    tukey_k: float = 1.5
    idw_power: float = 2.0
    idw_radius: int = 5
    smooth_sigma: float = 1.0
    quantile_method: str = "linear"

    def __post_init__(self):
        if self.tukey_k <= 0 or self.idw_power <= 0 or self.idw_radius < 1 or self.smooth_sigma < 0:
            raise ValueError(f"invalid preprocessing config {self}")


def tukey_filter(band: np.ndarray, k: float = 1.5, method: str = "linear") -> np.ndarray:
    """Set values outside [Q1 - k IQR, Q3 + k IQR] to NaN.

    >>> tukey_filter(np.array([1.0, 2.0, 3.0, 100.0])).tolist()
    [1.0, 2.0, 3.0, nan]
    """
    finite = np.isfinite(band)
    n = int(finite.sum())
    if n == 0:
        raise EmptyBandError("band has no finite values")
    if n < 4:
        raise ValueError(f"Tukey fences need at least 4 finite values, got {n}")
    q1, q3 = np.percentile(band[finite], [25, 75], method=method)
    iqr = q3 - q1
    lo, hi = q1 - k * iqr, q3 + k * iqr
    out = band.copy()
    out[finite & ((band < lo) | (band > hi))] = np.nan
    return out


def idw_kernel(power: float, radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    d = np.hypot(yy, xx)
    with np.errstate(divide="ignore"):
        w = np.where((d > 0) & (d <= radius), d ** -power, 0.0)
    return w


def idw_impute(band: np.ndarray, power: float = 2.0, radius: int = 5) -> np.ndarray:
    """Fill NaNs with inverse-distance weighted means of finite pixels within ``radius``.

    Pixels with no finite neighbour in range take the band median.  Finite
    input pixels are returned bit-unchanged.
    """
    finite = np.isfinite(band)
    if not finite.any():
        raise EmptyBandError("band has no finite values")
    missing = ~finite
    if not missing.any():
        return band.copy()
    kern = idw_kernel(power, radius)
    vals = np.where(finite, band, 0.0).astype(np.float64)
    num = ndimage.correlate(vals, kern, mode="constant", cval=0.0)
    den = ndimage.correlate(finite.astype(np.float64), kern, mode="constant", cval=0.0)
    out = band.copy()
    has = missing & (den > 0)
    out[has] = (num[has] / den[has]).astype(band.dtype)
    out[missing & (den == 0)] = np.median(band[finite])
    return out


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    half = int(math.ceil(3 * sigma))
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth(band: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur, kernel truncated at 3 sigma and renormalised at the edges."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return band.copy()
    k = gaussian_kernel_1d(sigma)
    finite = np.isfinite(band)
    vals = np.where(finite, band, 0.0).astype(np.float64)

    def blur(a):
        a = ndimage.correlate1d(a, k, axis=0, mode="constant", cval=0.0)
        return ndimage.correlate1d(a, k, axis=1, mode="constant", cval=0.0)
    num = blur(vals)
    den = blur(finite.astype(np.float64))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, num / den, np.nan)
    return out.astype(band.dtype)


def standardize(band: np.ndarray) -> np.ndarray:
    """z-scores using the population standard deviation of the finite pixels."""
    finite = np.isfinite(band)
    if not finite.any():
        raise EmptyBandError("band has no finite values")
    vals = band[finite].astype(np.float64)
    mu = vals.mean()
    sd = vals.std()
    if sd == 0 or not np.isfinite(sd):
        raise ConstantBandError("band has zero variance")
    out = np.full(band.shape, np.nan, dtype=band.dtype)
    out[finite] = ((vals - mu) / sd).astype(band.dtype)
    return out


@dataclass
class PipelineReport:
    dropped_bands: list[str] = field(default_factory=list)
    outliers: dict[str, int] = field(default_factory=dict)
    imputed: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def clean_band(band: np.ndarray, cfg: PreprocessConfig, valid: np.ndarray | None = None):
    """tukey -> idw -> smooth (imputed pixels only) -> standardize.

    ``valid`` marks pixels that take part (False = nodata, left NaN).
    Returns (band, n_outliers, n_imputed).
    """
    valid = np.ones(band.shape, bool) if valid is None else valid
    work = np.where(valid, band, np.nan).astype(np.float32)
    was_finite = np.isfinite(work)
    filtered = tukey_filter(work, cfg.tukey_k, cfg.quantile_method)
    n_out = int((was_finite & ~np.isfinite(filtered)).sum())
    holes = valid & ~np.isfinite(filtered)
    filled = idw_impute(np.where(valid, filtered, np.nan), cfg.idw_power, cfg.idw_radius)
    if holes.any() and cfg.smooth_sigma > 0:
        blurred = smooth(np.where(valid, filled, np.nan), cfg.smooth_sigma)
        filled = np.where(holes, blurred, filled)
    filled = np.where(valid, filled, np.nan).astype(np.float32)
    return standardize(filled), n_out, int(holes.sum())


def run_pipeline(raster: MultiBandRaster, cfg: PreprocessConfig | None = None) -> tuple[MultiBandRaster, PipelineReport]:
    """Clean every band; zero-variance or empty bands are dropped and reported."""
    cfg = cfg or PreprocessConfig()
    if raster.bands == 0 or raster.rows == 0 or raster.cols == 0:
        raise ValueError("raster is empty")
    valid = ~raster.nodata_mask
    report = PipelineReport()
    keep, bands = [], []
    for j, name in enumerate(raster.band_names):
        try:
            band, n_out, n_imp = clean_band(raster.data[j], cfg, valid)
        except (ConstantBandError, EmptyBandError) as exc:
            log.warning("dropping band %s: %s", name, exc)
            report.dropped_bands.append(name)
            continue
        report.outliers[name] = n_out
        report.imputed[name] = n_imp
        keep.append(j)
        bands.append(band)
    if not bands:
        raise ValueError("every band was dropped during preprocessing")
    data = np.stack(bands).astype(np.float32)
    out = MultiBandRaster(data, [raster.band_names[j] for j in keep], raster.transform,
                          raster.nodata_mask.copy())
    return out, report
