"""Loss-term and threshold ablations over seeds, on artifacts from run_pipeline.py.

    python3 scripts/run_ablation.py --run runs/desk [--grid all] [--taus 0.1 0.3 0.5 0.7 0.9] [--seeds 0 1 2]

Writes <run>/ablate/ablation.csv and <run>/ablation_tau.svg.  Finished cells are reused.
"""
import argparse
import logging
from pathlib import Path

import numpy as np

from sfpose import pipeline
from sfpose.config import RunConfig
from sfpose.svg import line_plot


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--run", type=Path, default=Path("runs/desk"))
    ap.add_argument("--grid", choices=("loss", "tau", "all"), default="all")
    ap.add_argument("--taus", type=float, nargs="+", default=list(pipeline.TAUS))
    ap.add_argument("--seeds", type=int, nargs="+")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    run = args.run
    cfg_path = run / "config.json"
    cfg = RunConfig.load(cfg_path) if cfg_path.exists() else RunConfig()
    seeds = args.seeds or cfg.seeds
    res = pipeline.ablate(cfg, run / "data", run / "source" / "model.ckpt", run / "prior" / "prior.ckpt",
                          run / "ablate", seeds, args.grid, tuple(args.taus))

    print(f"{'grid':<6}{'cell':<16}{'mean':>7}{'median':>8}")
    for r in res["rows"]:
        print(f"{r['grid']:<6}{r['cell']:<16}{100 * r['mean_pck']:7.2f}{100 * r['median_pck']:8.2f}")

    tau_rows = [r for r in res["rows"] if r["grid"] == "tau"]
    if tau_rows:
        p = np.array([r["p"] for r in tau_rows])
        series = {"median over seeds": (p, np.array([r["median_pck"] for r in tau_rows])),
                  "source-only": (p, np.full(len(p), res["source_only"]))}
        (run / "ablation_tau.svg").write_text(line_plot(series, "target PCK vs kept fraction", "p", "PCK"))


if __name__ == "__main__":
    main()
