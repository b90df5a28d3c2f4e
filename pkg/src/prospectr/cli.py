"""Command line interface: one subcommand per pipeline stage or protocol.

Every invocation writes into a fresh ``<out>/<timestamp>-<name>/`` run
directory holding the echoed config, hashes of the input files, the outputs
and a log.  Exit codes: 0 success, 2 configuration error, 3 data error.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import experiments as ex
from .clf import ClassifierConfig, MLPClassifier, ProspectivityNet, predict_map, strided_ids, train_classifier
from .config import RunConfig, load_config
from .mae import holdout_split, pretrain
from .metrics import METRIC_ORDER, EvalReport
from .nn import (CheckpointError, ConfigError, ViTConfig, ViTEncoder, arch_dict, load_checkpoint, read_manifest,
                 save_checkpoint)
from .preprocess import run_pipeline
from .pu import PoolExhaustedError, read_ids_csv, write_ids_csv, write_scale_csv
from .raster import (MultiBandRaster, RasterError, load_labels, load_raster, rasterize_records, read_records,
                     save_labels, save_raster)
from .render import reconstruction_grid, render_png
from .synth import generate_world, save_world
from .xai import attribution_maps, explain_fn, integrated_gradients

log = logging.getLogger("prospectr")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


class DataError(RuntimeError):
    pass


# -- run directory helpers ----------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def make_run_dir(out: Path, name: str) -> Path:
    stamp = dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = out / f"{stamp}-{name}"
    run, k = base, 1
    while run.exists():
        run, k = Path(f"{base}.{k}"), k + 1
    run.mkdir(parents=True)
    return run


def require(path, what: str) -> Path:
    if path is None:
        raise DataError(f"missing required input: {what}")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialise {type(o)}")


def write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else [], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# -- artifact loaders --------------------------------------------------------------

def checkpoint_stem(path, default_name: str) -> Path:
    """Accept a run directory, a ``.json``/``.bin`` file or a bare stem."""
    p = Path(path)
    if p.is_dir():
        p = p / default_name
    return p.with_suffix("") if p.suffix in (".json", ".bin") else p


def load_encoder(path) -> ViTEncoder:
    stem = checkpoint_stem(path, "encoder")
    require(stem.with_suffix(".json"), "encoder checkpoint")
    manifest = read_manifest(stem)
    enc = ViTEncoder(ViTConfig(**manifest["arch"]), manifest["seed"])
    load_checkpoint(enc, stem, manifest["arch"])
    enc.eval()
    return enc


def save_model(run: Path, net: ProspectivityNet, method: str, seed: int, encoder_stem, cfg: RunConfig) -> None:
    arch = {"method": method, "mlp_in": net.mlp.d_in, "hidden": list(cfg.clf.hidden), "dropout": cfg.clf.dropout,
            "window": net.window,
            "encoder": arch_dict(net.encoder.cfg) if net.encoder is not None else None}
    target = net.mlp if method in ("ours", "ann") else net
    save_checkpoint(target, run / "model", arch, seed,
                    extra={"encoder_checkpoint": str(checkpoint_stem(encoder_stem, "encoder").resolve())
                           if method == "ours" else None})


def load_model(model_dir) -> tuple[ProspectivityNet, dict]:
    stem = require(checkpoint_stem(model_dir, "model").with_suffix(".json"), "model checkpoint").with_suffix("")
    manifest = read_manifest(stem)
    arch, seed = manifest["arch"], manifest["seed"]
    ccfg = ClassifierConfig(hidden=tuple(arch["hidden"]), dropout=arch["dropout"])
    mlp = MLPClassifier(arch["mlp_in"], ccfg, seed)
    if arch["method"] == "ours":
        enc = load_encoder(manifest["extra"]["encoder_checkpoint"])
        net = ProspectivityNet(mlp, enc, frozen=True)
        load_checkpoint(mlp, stem, arch)
    elif arch["method"] == "vit":
        net = ProspectivityNet(mlp, ViTEncoder(ViTConfig(**arch["encoder"]), seed), frozen=False)
        load_checkpoint(net, stem, arch)
    else:
        net = ProspectivityNet(mlp, None, arch["window"])
        load_checkpoint(mlp, stem, arch)
    net.eval()
    return net, manifest


def load_prepared(args) -> ex.PreparedData:
    raster = load_raster(require(args.raster, "--raster"))
    labels = load_labels(require(args.labels, "--labels"))
    if labels.shape != (raster.rows, raster.cols):
        raise DataError("label raster shape does not match the feature raster")
    return ex.PreparedData(raster, labels)


# -- subcommands ----------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig, run: Path) -> list[Path]:
    spec = cfg.synth if args.seed is None else replace(cfg.synth, seed=args.seed)
    world = generate_world(spec)
    paths = save_world(world, run)
    render_png(world.truth, run / "truth.png", "heat_over_gray")
    log.info("world %s with %d deposits", world.raster.shape, len(world.records))
    return [paths["raster"], paths["truth"], paths["deposits"]]


def cmd_preprocess(args, cfg: RunConfig, run: Path) -> list[Path]:
    raster = load_raster(require(args.raster, "--raster"))
    clean, report = run_pipeline(raster, cfg.preprocess)
    save_raster(clean, run / "clean.mbr")
    write_json(run / "preprocess_report.json", report.to_dict())
    out = [run / "clean.mbr", run / "preprocess_report.json"]
    if args.deposits:
        records = read_records(require(args.deposits, "--deposits"))
        labels, rep = rasterize_records(records, clean.transform, (clean.rows, clean.cols),
                                        nodata_mask=clean.nodata_mask)
        save_labels(labels, run / "labels.mbr", clean.transform)
        write_json(run / "rasterize_report.json", asdict(rep))
        out += [run / "labels.mbr", run / "rasterize_report.json"]
    return out


def cmd_pretrain(args, cfg: RunConfig, run: Path) -> list[Path]:
    raster = load_raster(require(args.raster, "--raster"))
    seed = cfg.seeds[0] if args.seed is None else args.seed
    mcfg = replace(cfg.mae, encoder=replace(cfg.mae.encoder, bands=raster.bands))
    windows = ex.pretraining_windows(raster, cfg.raster.window, mcfg.sample_stride)

    hold_ids, _ = holdout_split(len(windows), mcfg.holdout, seed)
    hold = windows[hold_ids] if hold_ids.size else windows[:1]

    def on_epoch(stats, model, recon):
        if mcfg.recon_every and stats.epoch % mcfg.recon_every == 0:
            reconstruction_grid(hold[:4], recon[:4], run / f"recon_epoch{stats.epoch:03d}.png")

    res = pretrain(windows, mcfg, seed, on_epoch)
    save_checkpoint(res.model.encoder, run / "encoder", arch_dict(mcfg.encoder), seed,
                    extra={"best_epoch": res.best_epoch})
    save_checkpoint(res.model, run / "mae", {"mae": arch_dict(mcfg)}, seed)
    write_rows(run / "history.csv", [{"epoch": h.epoch, "loss": repr(h.loss), "ssim": repr(h.ssim),
                                       "psnr": repr(h.psnr)} for h in res.history])
    return [run / "encoder.json", run / "encoder.bin", run / "history.csv"]


def cmd_sample_negatives(args, cfg: RunConfig, run: Path) -> list[Path]:
    data = load_prepared(args)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    encoder = load_encoder(args.encoder) if args.encoder else None
    if encoder is None and cfg.pu.features == "ssl":
        raise DataError("--encoder is required unless pu.features is 'raw'")
    feats = ex.similarity_features(data, encoder, cfg)
    split = ex.make_split(data, feats, cfg, seed, args.filter_range)
    cols = data.raster.cols
    write_scale_csv(run / "scale.csv", split.scale, cols)
    write_ids_csv(run / "negatives.csv", split.negatives, cols)
    for part in ("train", "val", "test"):
        write_ids_csv(run / f"{part}.csv", getattr(split, f"{part}_ids"), cols, getattr(split, f"{part}_y"))
    scale_map = np.full(data.raster.rows * cols, np.nan, np.float32)
    scale_map[split.scale.unknown_ids] = split.scale.distance
    render_png(scale_map.reshape(data.raster.rows, cols), run / "scale.png", "quantile5")
    return [run / "scale.csv", run / "negatives.csv", run / "train.csv", run / "val.csv", run / "test.csv"]


def _method(args) -> str:
    if args.features == "raw":
        return "ann"
    return "vit" if args.no_pretrain else "ours"


def cmd_train(args, cfg: RunConfig, run: Path) -> list[Path]:
    raster = load_raster(require(args.raster, "--raster"))
    split_dir = require(args.split, "--split")
    seed = cfg.seeds[0] if args.seed is None else args.seed
    method = _method(args)
    encoder = None
    if method == "ours":
        if args.encoder is None:
            raise DataError("--encoder is required for a pretrained encoder (or pass --no-pretrain)")
        encoder = load_encoder(args.encoder)
    net = ex.build_net(method, cfg, seed, encoder, raster.bands)
    tr_ids, tr_y = read_ids_csv(require(split_dir / "train.csv", "train split"))
    va_ids, va_y = read_ids_csv(require(split_dir / "val.csv", "validation split"))
    res = train_classifier(net, net.inputs(raster, tr_ids), tr_y, net.inputs(raster, va_ids), va_y, cfg.clf, seed)
    save_model(run, net, method, seed, args.encoder or "", cfg)
    write_rows(run / "history.csv", [{k: repr(v) if isinstance(v, float) else v for k, v in r.items()}
                                     for r in res.history] or [{"epoch": 0}])
    return [run / "model.json", run / "model.bin", run / "history.csv"]


def cmd_predict(args, cfg: RunConfig, run: Path) -> list[Path]:
    raster = load_raster(require(args.raster, "--raster"))
    net, manifest = load_model(require(args.model, "--model"))
    T = args.mc_passes or cfg.clf.mc_passes
    pmap = predict_map(net, raster, args.stride or cfg.eval.map_stride, T, manifest["seed"])
    save_raster(pmap.to_raster(raster.transform), run / "map.mbr")
    render_png(pmap.mean, run / "map.png", "heat_over_gray", underlay=pmap.std)
    render_png(pmap.mean, run / "map_quantile5.png", "quantile5")
    return [run / "map.mbr"]


def cmd_explain(args, cfg: RunConfig, run: Path) -> list[Path]:
    raster = load_raster(require(args.raster, "--raster"))
    net, _ = load_model(require(args.model, "--model"))
    steps = args.ig_steps or cfg.xai.steps
    stride = args.stride or cfg.xai.stride
    ids = strided_ids(raster.rows, raster.cols, stride)
    maps, gaps = attribution_maps(net, raster, ids, steps, cfg.xai.chunk, cfg.xai.dropout_seed)
    save_raster(MultiBandRaster(maps, list(raster.band_names), raster.transform, ~np.isfinite(maps[0])),
                run / "attributions.mbr")
    for j, name in enumerate(raster.band_names):
        render_png(maps[j], run / f"attr_{name}.png", "signed_green")
    f = explain_fn(net, cfg.xai.dropout_seed)
    dumps = run / "predictions"
    dumps.mkdir()
    for pid in ids[:: max(1, ids.size // 4)][:4]:
        a = integrated_gradients(f, net.inputs(raster, np.array([pid]))[0], None, steps)
        (dumps / f"pixel_{int(pid)}.json").write_text(a.to_json())
    write_json(run / "completeness.json", {"steps": steps, "max_gap": float(np.nanmax(gaps)),
                                           "mean_gap": float(np.nanmean(gaps))})
    return [run / "attributions.mbr", run / "completeness.json"]


def _report_outputs(run: Path, report: EvalReport, stem: str) -> list[Path]:
    (run / f"{stem}.json").write_text(report.to_json())
    (run / f"{stem}.csv").write_text(report.to_csv())
    rows = [{"method": m.name, **{k: repr(v) if isinstance(v, float) else v for k, v in r.items()}}
            for m in report.methods for r in m.per_seed]
    write_rows(run / f"{stem}_per_seed.csv", rows)
    return [run / f"{stem}.json", run / f"{stem}.csv", run / f"{stem}_per_seed.csv"]


def _encoder_for_protocol(args, cfg: RunConfig):
    if args.encoder:
        return load_encoder(args.encoder)
    if "ours" in cfg.eval.methods or cfg.pu.features == "ssl":
        raise DataError("--encoder is required for method 'ours' and for SSL similarity features")
    return None


def cmd_evaluate(args, cfg: RunConfig, run: Path) -> list[Path]:
    data = load_prepared(args)
    encoder = _encoder_for_protocol(args, cfg)
    out = ex.run_trials(data, encoder, cfg, filter_range=args.filter_range)
    return _report_outputs(run, out.reports[0.0], "report")


def cmd_ablate_sparsity(args, cfg: RunConfig, run: Path) -> list[Path]:
    data = load_prepared(args)
    encoder = _encoder_for_protocol(args, cfg)
    f = cfg.eval.drop_fraction if args.drop_fraction is None else args.drop_fraction
    out = ex.run_trials(data, encoder, cfg, drop_fractions=(0.0, f))
    paths = _report_outputs(run, out.reports[0.0], "intact") + _report_outputs(run, out.reports[f], "degraded")
    rows = []
    for m in out.reports[f].methods:
        agg, base = m.aggregate(), out.reports[0.0].aggregate()[m.name]
        rows.append({"method": m.name, "drop_fraction": f,
                     **{k: f"{100 * agg[k]['mean']:.1f}±{100 * agg[k]['std']:.1f}" for k in METRIC_ORDER},
                     "F1_intact": f"{100 * base['F1']['mean']:.1f}"})
    write_rows(run / "sparsity.csv", rows)
    return paths + [run / "sparsity.csv"]


def cmd_ablate_filter_range(args, cfg: RunConfig, run: Path) -> list[Path]:
    data = load_prepared(args)
    if not args.encoder:
        raise DataError("--encoder is required for the filter-range ablation")
    encoder = load_encoder(args.encoder)
    if args.filter_range is not None:
        cfg = replace(cfg, eval=replace(cfg.eval, filter_ranges=(args.filter_range,)))
    rows = ex.filter_range_ablation(data, encoder, cfg)
    write_json(run / "filter_range.json", rows)
    table = [{"filter_range": f"{100 * r['filter_range']:.0f}%",
              **{k: f"{100 * r[k]:.1f}±{100 * r[k + '_std']:.1f}" for k in METRIC_ORDER},
              "map_mean_likelihood": f"{r['map_mean_likelihood']:.4f}"} for r in rows]
    write_rows(run / "filter_range.csv", table)
    return [run / "filter_range.json", run / "filter_range.csv"]


def cmd_report(args, cfg: RunConfig, run: Path) -> list[Path]:
    lines = ["| source | method | " + " | ".join(METRIC_ORDER) + " | params | FLOPs |",
             "|" + "---|" * (len(METRIC_ORDER) + 4)]
    for path in args.inputs:
        report = EvalReport.from_json(require(path, "report").read_text())
        for m in report.methods:
            agg = m.aggregate()
            cells = [f"{100 * agg[k]['mean']:.1f} ± {100 * agg[k]['std']:.1f}" for k in METRIC_ORDER]
            lines.append(f"| {Path(path).parent.name}/{Path(path).stem} | {m.name} | " + " | ".join(cells)
                         + f" | {m.params or ''} | {m.flops or ''} |")
    lines += ["", "AUROC and ACC: metrics not intended for imbalanced datasets."]
    (run / "summary.md").write_text("\n".join(lines) + "\n")
    return [run / "summary.md"]


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "pretrain": cmd_pretrain,
    "sample-negatives": cmd_sample_negatives, "train": cmd_train, "predict": cmd_predict,
    "explain": cmd_explain, "evaluate": cmd_evaluate, "ablate-sparsity": cmd_ablate_sparsity,
    "ablate-filter-range": cmd_ablate_filter_range, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config (defaults used when omitted)")
    common.add_argument("--seed", type=int, help="base seed (overrides the first configured seed)")
    common.add_argument("--out", type=Path, default=Path("runs"), help="parent directory for run directories")
    common.add_argument("--threads", type=int, help="BLAS thread cap (falls back to PROSPECTR_THREADS)")
    common.add_argument("--name", help="run name (defaults to the subcommand)")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--raster", type=Path, help="preprocessed feature raster (.mbr)")
    data.add_argument("--labels", type=Path, help="label raster (.mbr)")
    data.add_argument("--encoder", type=Path, help="encoder checkpoint stem")

    p = argparse.ArgumentParser(prog="prospectr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic world")
    s = sub.add_parser("preprocess", parents=[common], help="clean a raster and rasterize deposit records")
    s.add_argument("--raster", type=Path)
    s.add_argument("--deposits", type=Path)
    s = sub.add_parser("pretrain", parents=[common], help="masked-autoencoder pretraining")
    s.add_argument("--raster", type=Path)
    s = sub.add_parser("sample-negatives", parents=[common, data], help="likely-negative sampling and splits")
    s.add_argument("--filter-range", type=float)
    s = sub.add_parser("train", parents=[common], help="train a prospectivity classifier")
    s.add_argument("--raster", type=Path)
    s.add_argument("--split", type=Path, help="directory written by sample-negatives")
    s.add_argument("--encoder", type=Path)
    s.add_argument("--no-pretrain", action="store_true", help="train the encoder end to end from scratch")
    s.add_argument("--features", choices=("ssl", "raw"), default="ssl")
    s.add_argument("--arch", choices=("vit", "mlp"), default="vit")
    s = sub.add_parser("predict", parents=[common], help="MC Dropout prospectivity map")
    s.add_argument("--raster", type=Path)
    s.add_argument("--model", type=Path, help="directory written by train")
    s.add_argument("--mc-passes", type=int)
    s.add_argument("--stride", type=int)
    s.add_argument("--threshold", type=float)
    s = sub.add_parser("explain", parents=[common], help="Integrated Gradients attribution maps")
    s.add_argument("--raster", type=Path)
    s.add_argument("--model", type=Path)
    s.add_argument("--ig-steps", type=int)
    s.add_argument("--stride", type=int)
    for name, helptext in (("evaluate", "multi-seed evaluation of all methods"),
                           ("ablate-sparsity", "test-time feature dropping"),
                           ("ablate-filter-range", "likely-negative filter range sweep")):
        s = sub.add_parser(name, parents=[common, data], help=helptext)
        s.add_argument("--filter-range", type=float)
        s.add_argument("--drop-fraction", type=float)
        s.add_argument("--mc-passes", type=int)
        s.add_argument("--threshold", type=float)
    s = sub.add_parser("report", parents=[common], help="summarise report JSON files")
    s.add_argument("inputs", nargs="+", type=Path)
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,) + tuple(s for s in cfg.seeds[1:] if s != args.seed))
    if getattr(args, "mc_passes", None):
        cfg = replace(cfg, clf=replace(cfg.clf, mc_passes=args.mc_passes))
    if getattr(args, "threshold", None) is not None:
        cfg = replace(cfg, eval=replace(cfg.eval, threshold=args.threshold),
                      clf=replace(cfg.clf, threshold=args.threshold))
    if getattr(args, "filter_range", None) is not None:
        cfg = replace(cfg, pu=replace(cfg.pu, filter_range=args.filter_range))
    if getattr(args, "drop_fraction", None) is not None:
        cfg = replace(cfg, eval=replace(cfg.eval, drop_fraction=args.drop_fraction))
    if getattr(args, "ig_steps", None):
        cfg = replace(cfg, xai=replace(cfg.xai, steps=args.ig_steps))
    return cfg


def thread_count(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("PROSPECTR_THREADS")
    return int(env) if env else None


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        threads = thread_count(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run = make_run_dir(args.out, args.name or args.command)
    handler = logging.FileHandler(run / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        (run / "config.json").write_text(cfg.to_json())
        inputs = {k: str(v) for k, v in vars(args).items() if isinstance(v, Path) and k != "out"}
        hashes = {k: sha256_file(v) for k, v in inputs.items() if Path(v).is_file()}
        write_json(run / "inputs.json", {"args": inputs, "sha256": hashes, "command": args.command})
        with threadpool_limits(limits=threads):
            outputs = COMMANDS[args.command](args, cfg, run)
        write_json(run / "outputs.json", {str(Path(p).relative_to(run)): sha256_file(p)
                                          for p in outputs if Path(p).is_file()})
        print(run)
        return EXIT_OK
    except ConfigError as exc:
        log.error("config error: %s", exc)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, RasterError, CheckpointError, PoolExhaustedError) as exc:
        log.error("data error: %s", exc)
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        root.removeHandler(handler)
        handler.close()


if __name__ == "__main__":
    sys.exit(main())
