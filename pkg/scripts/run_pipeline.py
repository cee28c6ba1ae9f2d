"""Desk-scale end-to-end run: data, source model, prior, adaptation, prior histogram.

    python3 scripts/run_pipeline.py --out runs/desk [--config cfg.json] [--seed 0]

Stages whose manifest already exists are skipped, so an interrupted run resumes.
"""
import argparse
import json
import logging
from pathlib import Path

from sfpose import pipeline
from sfpose.config import RunConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--config", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    out, seed = args.out, args.seed
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")

    stages = [
        ("data", lambda d: pipeline.gen_data(cfg, d, seed)),
        ("source", lambda d: pipeline.stage_train_source(cfg, out / "data", d, seed)),
        ("prior", lambda d: pipeline.stage_train_prior(cfg, out / "data", d, seed)),
        ("adapt", lambda d: pipeline.stage_adapt(cfg, out / "data", out / "source" / "model.ckpt",
                                                 out / "prior" / "prior.ckpt", d, seed)),
        ("scores", lambda d: pipeline.score_poses(out / "prior" / "prior.ckpt", out / "data" / "aux" / "poses.jsonl",
                                                  d, 2.0, seed)),
    ]
    for name, run in stages:
        d = out / name
        if (d / "manifest.json").exists():
            logging.info("%s: reusing %s", name, d)
            continue
        m = run(d)
        logging.info("%s: %.0fs", name, m["timings"]["seconds"])

    src = json.loads((out / "source" / "metrics.json").read_text())["source_test"]
    ad = json.loads((out / "adapt" / "metrics.json").read_text())
    print(pipeline.pck_table(src, "source test"))
    print(pipeline.pck_table(ad["source_only"], "target, source-only").splitlines()[1])
    for which in ("student", "teacher"):
        print(pipeline.pck_table(ad[which], f"target, {which}").splitlines()[1])
    print("prior scores:", json.loads((out / "scores" / "metrics.json").read_text()))


if __name__ == "__main__":
    main()
