"""Experimental protocols shared by the CLI and the scripts.

Three methods are compared on identical splits:

* ``ours``: frozen MAE-pretrained encoder features with the MLP head,
* ``vit``: the same architecture trained end to end from random init,
* ``ann``: the MLP head on the raw center-pixel feature vector.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .clf import MLPClassifier, ProspectivityNet, mc_predict, predict_map, train_classifier
from .config import RunConfig
from .metrics import METRIC_ORDER, EvalReport, evaluate
from .nn import ViTEncoder, count_params_flops
from .preprocess import PipelineReport, run_pipeline
from .pu import SimilarityScale, balance_oversample, select_negatives, similarity_scale, split_80_10_10
from .raster import DepositRecord, Label, LabelRaster, MultiBandRaster, extract_windows, rasterize_records
from .synth import degrade_features
from .tensor import rng_stream

log = logging.getLogger(__name__)


@dataclass
class PreparedData:
    raster: MultiBandRaster
    labels: LabelRaster
    report: PipelineReport | None = None

    @property
    def positives(self) -> np.ndarray:
        return self.labels.ids(Label.PRESENT)

    @property
    def unknowns(self) -> np.ndarray:
        ids = self.labels.ids(Label.UNKNOWN)
        return ids[~self.raster.nodata_mask.reshape(-1)[ids]]


def prepare(raster: MultiBandRaster, records: list[DepositRecord], cfg: RunConfig) -> PreparedData:
    clean, report = run_pipeline(raster, cfg.preprocess)
    labels, _ = rasterize_records(records, clean.transform, (clean.rows, clean.cols),
                                  nodata_mask=clean.nodata_mask)
    return PreparedData(clean, labels, report)


def pretraining_windows(raster: MultiBandRaster, window: int, stride: int = 1) -> np.ndarray:
    """Windows around every ``stride``-th valid pixel; labels play no part."""
    r, c = np.meshgrid(np.arange(0, raster.rows, stride), np.arange(0, raster.cols, stride), indexing="ij")
    ids = (r * raster.cols + c).reshape(-1)
    ids = ids[~raster.nodata_mask.reshape(-1)[ids]]
    return extract_windows(raster, ids, window)


def pixel_features(net: ProspectivityNet, raster: MultiBandRaster, batch: int = 512) -> np.ndarray:
    """Network features for every pixel in row-major order."""
    ids = np.arange(raster.rows * raster.cols)
    return np.concatenate([net.encode(net.inputs(raster, ids[s:s + batch])) for s in range(0, ids.size, batch)])


@dataclass
class Split:
    train_ids: np.ndarray
    train_y: np.ndarray
    val_ids: np.ndarray
    val_y: np.ndarray
    test_ids: np.ndarray
    test_y: np.ndarray
    negatives: np.ndarray
    scale: SimilarityScale


def make_split(data: PreparedData, features: np.ndarray, cfg: RunConfig, seed: int,
               filter_range: float | None = None) -> Split:
    """Likely-negative sampling, stratified 80/10/10 split and training-set oversampling."""
    pu = cfg.pu if filter_range is None else replace(cfg.pu, filter_range=filter_range)
    pos, unk = data.positives, data.unknowns
    scale = similarity_scale(features[unk], features[pos], pu.metric, unk, pos)
    neg = select_negatives(scale, pu, rng_stream(seed, "pu", "negatives"), n_positives=pos.size)
    ids = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(pos.size, np.int8), np.zeros(neg.size, np.int8)])
    label_of = dict(zip(ids.tolist(), y.tolist()))
    train, val, test = split_80_10_10(ids, y, seed)
    lab = lambda part: np.array([label_of[i] for i in part.tolist()], dtype=np.int8)  # noqa: E731
    train_y = lab(train)
    if pu.oversample and (train_y == 1).any() and (train_y == 0).any():
        train, train_y = balance_oversample(train[train_y == 1], train[train_y == 0],
                                            rng_stream(seed, "pu", "oversample"))
    return Split(train, train_y, val, lab(val), test, lab(test), neg, scale)


def similarity_features(data: PreparedData, encoder: ViTEncoder | None, cfg: RunConfig) -> np.ndarray:
    if cfg.pu.features == "raw" or encoder is None:
        net = ProspectivityNet(MLPClassifier(data.raster.bands, cfg.clf), None, cfg.raster.window)
    else:
        net = ProspectivityNet(MLPClassifier(encoder.cfg.dim, cfg.clf), encoder)
    return pixel_features(net, data.raster)


def build_net(method: str, cfg: RunConfig, seed: int, encoder: ViTEncoder | None, bands: int) -> ProspectivityNet:
    if method == "ours":
        if encoder is None:
            raise ValueError("method 'ours' needs a pretrained encoder")
        return ProspectivityNet(MLPClassifier(encoder.cfg.dim, cfg.clf, seed), encoder, frozen=True)
    if method == "vit":
        enc = ViTEncoder(replace(cfg.mae.encoder, bands=bands), seed)
        return ProspectivityNet(MLPClassifier(enc.cfg.dim, cfg.clf, seed), enc, frozen=False)
    if method == "ann":
        return ProspectivityNet(MLPClassifier(bands, cfg.clf, seed), None, cfg.raster.window)
    raise ValueError(f"unknown method {method!r}")


def fit(method: str, data: PreparedData, split: Split, encoder: ViTEncoder | None, cfg: RunConfig, seed: int):
    net = build_net(method, cfg, seed, encoder, data.raster.bands)
    r = data.raster
    result = train_classifier(net, net.inputs(r, split.train_ids), split.train_y,
                              net.inputs(r, split.val_ids), split.val_y, cfg.clf, seed)
    return net, result


def score(net: ProspectivityNet, raster: MultiBandRaster, ids: np.ndarray, cfg: RunConfig, seed: int,
          drop_fraction: float = 0.0) -> np.ndarray:
    """MC Dropout mean likelihood for ``ids``, optionally with test-time band dropping."""
    x = net.inputs(raster, ids)
    if drop_fraction > 0:
        x, _ = degrade_features(x, drop_fraction, rng_stream(seed, "sparsity"))
    mean, _ = mc_predict(net.mlp, net.encode(x), cfg.clf.mc_passes, seed, ids)
    return mean


@dataclass
class TrialOutput:
    reports: dict[float, EvalReport]
    nets: dict[tuple[str, int], ProspectivityNet]
    splits: dict[int, Split]


def run_trials(data: PreparedData, encoder: ViTEncoder | None, cfg: RunConfig,
               methods: tuple[str, ...] | None = None, drop_fractions: tuple[float, ...] = (0.0,),
               filter_range: float | None = None, keep_nets: bool = False,
               sim_features: np.ndarray | None = None) -> TrialOutput:
    """Train every method on every seed's split; one report per test-time drop fraction."""
    methods = tuple(methods or cfg.eval.methods)
    if sim_features is None:
        sim_features = similarity_features(data, encoder, cfg)
    runs = {f: {m: [] for m in methods} for f in drop_fractions}
    complexity, nets, splits = {}, {}, {}
    for seed in cfg.seeds:
        split = make_split(data, sim_features, cfg, seed, filter_range)
        splits[seed] = split
        for method in methods:
            net, _ = fit(method, data, split, encoder, cfg, seed)
            for f in drop_fractions:
                s = score(net, data.raster, split.test_ids, cfg, seed, f)
                runs[f][method].append((seed, s, split.test_y))
            if method not in complexity:
                complexity[method] = count_params_flops(net)
            if keep_nets:
                nets[(method, seed)] = net
            log.info("seed %d method %s done", seed, method)
    reports = {f: evaluate(runs[f], cfg.eval.threshold, complexity, cfg.eval.alpha) for f in drop_fractions}
    return TrialOutput(reports, nets, splits)


def filter_range_ablation(data: PreparedData, encoder: ViTEncoder, cfg: RunConfig,
                          sim_features: np.ndarray | None = None) -> list[dict]:
    """Per filter range: mean/std test metrics of ``ours`` and the mean map likelihood."""
    if sim_features is None:
        sim_features = similarity_features(data, encoder, cfg)
    probe = ProspectivityNet(MLPClassifier(encoder.cfg.dim, cfg.clf), encoder)
    all_features = pixel_features(probe, data.raster)
    rows = []
    for fr in cfg.eval.filter_ranges:
        out = run_trials(data, encoder, cfg, ("ours",), (0.0,), fr, keep_nets=True, sim_features=sim_features)
        agg = out.reports[0.0].aggregate()["ours"]
        map_means = []
        for seed in cfg.seeds:
            net = out.nets[("ours", seed)]
            pmap = predict_map(net, data.raster, cfg.eval.map_stride, cfg.clf.mc_passes, seed,
                               features=all_features)
            map_means.append(float(np.nanmean(pmap.mean)))
        row = {"filter_range": fr}
        for m in METRIC_ORDER:
            row[m] = agg[m]["mean"]
            row[m + "_std"] = agg[m]["std"]
        row["map_mean_likelihood"] = float(np.mean(map_means))
        row["map_mean_likelihood_std"] = float(np.std(map_means, ddof=1)) if len(map_means) > 1 else 0.0
        rows.append(row)
    return rows
