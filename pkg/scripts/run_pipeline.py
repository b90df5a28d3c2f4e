"""Run the whole CLI pipeline on a synthetic world and print the run directories.

    python scripts/run_pipeline.py --config configs/tiny.json --out runs
"""
import argparse
import sys
from pathlib import Path

from prospectr.cli import EXIT_OK, main


def step(out: Path, config: list[str], name: str, *argv: str) -> Path:
    code = main([*argv, *config, "--out", str(out), "--name", name])
    if code != EXIT_OK:
        sys.exit(code)
    return max(out.glob(f"*-{name}"))


def run(out: Path, config: Path | None) -> dict[str, Path]:
    cfg = ["--config", str(config)] if config else []
    world = step(out, cfg, "world", "synth")
    prep = step(out, cfg, "prep", "preprocess", "--raster", str(world / "world.mbr"),
                "--deposits", str(world / "deposits.csv"))
    clean, labels = str(prep / "clean.mbr"), str(prep / "labels.mbr")
    enc = step(out, cfg, "encoder", "pretrain", "--raster", clean)
    data = ["--raster", clean, "--labels", labels, "--encoder", str(enc / "encoder")]
    split = step(out, cfg, "split", "sample-negatives", *data)
    model = step(out, cfg, "model", "train", "--raster", clean, "--split", str(split),
                 "--encoder", str(enc / "encoder"))
    pmap = step(out, cfg, "map", "predict", "--raster", clean, "--model", str(model))
    xai = step(out, cfg, "explain", "explain", "--raster", clean, "--model", str(model))
    ev = step(out, cfg, "evaluate", "evaluate", *data)
    summary = step(out, cfg, "report", "report", str(ev / "report.json"))
    return {"world": world, "prep": prep, "encoder": enc, "split": split, "model": model, "map": pmap,
            "explain": xai, "evaluate": ev, "report": summary}


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, default=Path("runs"))
    args = p.parse_args()
    for key, path in run(args.out, args.config).items():
        print(f"{key:9s} {path}")
