"""Synthetic desk-scale worlds: correlated explanatory layers with planted deposits.

Each layer is a Gaussian random field made by spectral synthesis.  White
noise is shared within groups of layers before filtering, so layers carry
partly redundant information, as real geophysical and geological proxies do.
True prospectivity is a logistic function of a weighted subset of layers.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .raster import (DepositRecord, GeoTransform, MultiBandRaster, load_raster, read_records,
                     save_raster, write_records)
from .tensor import rng_stream


class WorldSpecError(ValueError):
    pass


@dataclass
class WorldSpec:
    rows: int = 64
    cols: int = 64
    n_layers: int = 24
    # cycled over layers when shorter than n_layers
    correlation_length: tuple[float, ...] = (3.0, 4.0, 6.0, 8.0)
    rule_layers: tuple[int, ...] = (0, 5, 10, 15)
    rule_weights: tuple[float, ...] = (1.6, -1.2, 1.2, 1.0)
    rule_bias: float = -3.0
    n_deposits: int = 40
    gamma: float = 4.0
    n_groups: int = 6
    shared_fraction: float = 0.6
    missing_fraction: float = 0.01
    outlier_fraction: float = 0.002
    pixel_size: float = 1000.0
    origin: tuple[float, float] = (500_000.0, 7_000_000.0)
    deposit_type: str = "synthetic"
    seed: int = 0

    def __post_init__(self):
        self.correlation_length = tuple(float(v) for v in self.correlation_length)
        self.rule_layers = tuple(int(v) for v in self.rule_layers)
        self.rule_weights = tuple(float(v) for v in self.rule_weights)
        self.origin = tuple(float(v) for v in self.origin)
        if self.rows < 2 or self.cols < 2 or self.n_layers < 1:
            raise WorldSpecError("world must be at least 2x2 with one layer")
        if not self.n_deposits < self.rows * self.cols / 100:
            raise WorldSpecError(f"n_deposits must be < rows*cols/100 = {self.rows * self.cols / 100}")
        if len(self.rule_layers) != len(self.rule_weights) or not self.rule_layers:
            raise WorldSpecError("rule needs one weight per rule layer")
        if any(not 0 <= j < self.n_layers for j in self.rule_layers):
            raise WorldSpecError("rule references a layer that does not exist")
        if any(v <= 0 for v in self.correlation_length):
            raise WorldSpecError("correlation lengths must be positive")
        if not 0.0 <= self.shared_fraction < 1.0 or self.n_groups < 1:
            raise WorldSpecError("shared_fraction must be in [0, 1) and n_groups >= 1")
        if not 0.0 <= self.missing_fraction + self.outlier_fraction < 0.5:
            raise WorldSpecError("corruption fractions out of range")

    def layer_length(self, j: int) -> float:
        return self.correlation_length[j % len(self.correlation_length)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class World:
    raster: MultiBandRaster
    truth: np.ndarray
    records: list[DepositRecord]
    deposit_ids: np.ndarray
    spec: WorldSpec = field(default_factory=WorldSpec)


def gaussian_filter_spectrum(shape: tuple[int, int], length: float) -> np.ndarray:
    """Frequency response of a Gaussian blur giving autocorrelation exp(-lag^2 / (2 L^2)).

    Blurring white noise with std ``s`` yields correlation exp(-lag^2 / (4 s^2)),
    hence ``s = L / sqrt(2)`` and the correlation at lag ``L`` is exp(-1/2).
    """
    s = length / math.sqrt(2.0)
    fy = np.fft.fftfreq(shape[0])[:, None]
    fx = np.fft.fftfreq(shape[1])[None, :]
    return np.exp(-2.0 * math.pi ** 2 * s ** 2 * (fx ** 2 + fy ** 2))


def grf(noise: np.ndarray, length: float) -> np.ndarray:
    """Filter white noise to a zero-mean, unit-variance periodic Gaussian random field."""
    field_ = np.fft.ifft2(np.fft.fft2(noise) * gaussian_filter_spectrum(noise.shape, length)).real
    field_ -= field_.mean()
    return field_ / field_.std()


def truth_from_layers(layers: np.ndarray, spec: WorldSpec) -> np.ndarray:
    logit = np.full(layers.shape[1:], spec.rule_bias, dtype=np.float64)
    for j, w in zip(spec.rule_layers, spec.rule_weights):
        logit += w * layers[j]
    return 1.0 / (1.0 + np.exp(-logit))


def sample_deposits(truth: np.ndarray, n: int, gamma: float, rng: np.random.Generator) -> np.ndarray:
    """Flat pixel ids drawn without replacement with probability proportional to truth^gamma."""
    w = truth.reshape(-1).astype(np.float64) ** gamma
    return np.sort(rng.choice(w.size, size=n, replace=False, p=w / w.sum()))


def generate_world(spec: WorldSpec | None = None) -> World:
    spec = spec or WorldSpec()
    r, c, m = spec.rows, spec.cols, spec.n_layers
    shared = [rng_stream(spec.seed, "synth", "group", g).standard_normal((r, c)) for g in range(spec.n_groups)]
    a, b = math.sqrt(spec.shared_fraction), math.sqrt(1.0 - spec.shared_fraction)
    clean = np.empty((m, r, c), dtype=np.float64)
    for j in range(m):
        own = rng_stream(spec.seed, "synth", "layer", j).standard_normal((r, c))
        clean[j] = grf(a * shared[j % spec.n_groups] + b * own, spec.layer_length(j))
    truth = truth_from_layers(clean, spec)
    ids = sample_deposits(truth, spec.n_deposits, spec.gamma, rng_stream(spec.seed, "synth", "deposits"))

    # layer-specific affine scales so the preprocessing z-scores do real work
    scale_rng = rng_stream(spec.seed, "synth", "scale")
    data = clean * scale_rng.uniform(0.5, 50.0, (m, 1, 1)) + scale_rng.uniform(-100.0, 100.0, (m, 1, 1))
    corrupt_rng = rng_stream(spec.seed, "synth", "corrupt")
    for j in range(m):
        u = corrupt_rng.random((r, c))
        sd = data[j].std()
        spikes = corrupt_rng.choice([-1.0, 1.0], (r, c)) * 12.0 * sd
        data[j] = np.where(u < spec.outlier_fraction, data[j] + spikes, data[j])
        data[j][(u >= spec.outlier_fraction) & (u < spec.outlier_fraction + spec.missing_fraction)] = np.nan

    transform = GeoTransform(spec.origin[0], spec.origin[1], spec.pixel_size, -spec.pixel_size)
    raster = MultiBandRaster(data.astype(np.float32), [f"layer_{j:02d}" for j in range(m)], transform)
    jitter = rng_stream(spec.seed, "synth", "jitter").uniform(0.1, 0.9, (ids.size, 2))
    rows, cols = np.divmod(ids, c)
    xs, ys = transform.pixel_to_map(rows + jitter[:, 0], cols + jitter[:, 1])
    records = [DepositRecord(f"d{k:04d}", float(x), float(y), spec.deposit_type)
               for k, (x, y) in enumerate(zip(xs, ys))]
    return World(raster, truth.astype(np.float32), records, ids, spec)


def degrade_features(samples: np.ndarray, drop_fraction: float, rng: np.random.Generator):
    """Zero exactly round(f * m) randomly chosen bands (axis 1) of each sample.

    Zero is the band mean after standardisation, i.e. "no signal".  Returns
    the degraded copy and the boolean [N, m] mask of dropped bands.
    """
    if not 0.0 <= drop_fraction < 1.0:
        raise ValueError("drop_fraction must be in [0, 1)")
    samples = np.asarray(samples)
    n, m = samples.shape[:2]
    k = int(round(drop_fraction * m))
    mask = np.zeros((n, m), dtype=bool)
    if k:
        order = np.argsort(rng.random((n, m)), axis=1)[:, :k]
        np.put_along_axis(mask, order, True, axis=1)
    out = samples.copy()
    out[mask] = 0
    return out, mask


def save_world(world: World, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"raster": out / "world.mbr", "truth": out / "truth.mbr", "deposits": out / "deposits.csv"}
    save_raster(world.raster, paths["raster"], meta={"world_spec": world.spec.to_dict()})
    save_raster(MultiBandRaster(world.truth[None], ["truth"], world.raster.transform), paths["truth"])
    write_records(paths["deposits"], world.records)
    return paths


def load_world(out_dir) -> World:
    out = Path(out_dir)
    raster = load_raster(out / "world.mbr")
    truth = load_raster(out / "truth.mbr").data[0]
    records = read_records(out / "deposits.csv")
    rows, cols = raster.transform.map_to_pixel([r.x for r in records], [r.y for r in records])
    return World(raster, truth, records, np.sort(rows * raster.cols + cols))
