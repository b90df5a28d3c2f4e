"""Filter-range and feature-sparsity ablations on the default synthetic world.

Reuses an encoder written by pretrain_convergence.py (or `prospectr pretrain`).

    python scripts/ablations.py --encoder runs/convergence/encoder
"""
import argparse
import json
from pathlib import Path

from prospectr.cli import load_encoder
from prospectr.config import RunConfig, load_config
from prospectr.experiments import filter_range_ablation, prepare, run_trials, similarity_features
from prospectr.metrics import METRIC_ORDER
from prospectr.synth import generate_world


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--encoder", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, default=Path("runs/ablations"))
    args = p.parse_args()
    cfg = load_config(args.config) if args.config else RunConfig()
    args.out.mkdir(parents=True, exist_ok=True)

    world = generate_world(cfg.synth)
    data = prepare(world.raster, world.records, cfg)
    encoder = load_encoder(args.encoder)
    sim = similarity_features(data, encoder, cfg)

    rows = filter_range_ablation(data, encoder, cfg, sim_features=sim)
    (args.out / "filter_range.json").write_text(json.dumps(rows, indent=2))
    print("filter range | " + " | ".join(METRIC_ORDER) + " | map mean")
    for r in rows:
        print(f"{r['filter_range']:>11.0%} | " + " | ".join(f"{100 * r[m]:.1f}" for m in METRIC_ORDER)
              + f" | {r['map_mean_likelihood']:.4f}")

    f = cfg.eval.drop_fraction
    report = run_trials(data, encoder, cfg, drop_fractions=(0.0, f), sim_features=sim).reports
    (args.out / "sparsity.json").write_text(json.dumps({str(k): v.to_dict() for k, v in report.items()}, indent=2))
    for frac, rep in report.items():
        agg = rep.aggregate()
        print(f"drop {frac:.0%}: " + ", ".join(f"{m} F1 {100 * agg[m]['F1']['mean']:.1f}" for m in agg))


if __name__ == "__main__":
    main()
