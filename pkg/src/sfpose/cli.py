"""Command line: gen-data, train-source, train-prior, adapt, eval, score-poses, ablate."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import RunConfig


def _config(args) -> RunConfig:
    return RunConfig.load(args.config) if args.config else RunConfig()


def _seed(args, cfg: RunConfig) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


def cmd_gen_data(args):
    cfg = _config(args)
    m = pipeline.gen_data(cfg, args.out, _seed(args, cfg))
    print(f"wrote {len(m['outputs'])} files to {args.out}")


def cmd_train_source(args):
    cfg = _config(args)
    pipeline.stage_train_source(cfg, args.data, args.out, _seed(args, cfg))
    res = json.loads((Path(args.out) / "metrics.json").read_text())["source_test"]
    print(pipeline.pck_table(res, "source"))


def cmd_train_prior(args):
    cfg = _config(args)
    pipeline.stage_train_prior(cfg, args.data, args.out, _seed(args, cfg), args.exact_knn)
    print(json.loads((Path(args.out) / "metrics.json").read_text())["mean_score"])


def cmd_adapt(args):
    cfg = _config(args)
    pipeline.stage_adapt(cfg, args.data, args.source, args.prior, args.out, _seed(args, cfg))
    m = json.loads((Path(args.out) / "metrics.json").read_text())
    print(pipeline.pck_table(m["source_only"], "source"))
    for which in ("student", "teacher"):
        print(pipeline.pck_table(m[which], which).splitlines()[1])


def cmd_eval(args):
    whiches = ["student", "teacher"] if args.which == "both" else [args.which]
    if args.model:
        models = [("model", Path(args.model))]
    elif args.run:
        models = [(w, Path(args.run) / f"{w}.ckpt") for w in whiches]
    else:
        raise ValueError("eval needs --model CKPT or --run DIR")
    results = {}
    for label, path in models:
        results[label] = pipeline.stage_eval(path, args.split, args.skeleton)
        print(pipeline.pck_table(results[label], label))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        pipeline._write_metrics(out / "metrics.json", results)
        pipeline.write_manifest(out, "eval", {"which": args.which}, 0,
                                {k: str(p) for k, p in models} | {"split": str(args.split)}, {})


def cmd_score_poses(args):
    pipeline.score_poses(args.prior, args.poses, args.out, args.corrupt, args.seed or 0, args.bins)
    print(json.loads((Path(args.out) / "metrics.json").read_text()))


def cmd_ablate(args):
    cfg = _config(args)
    seeds = args.seeds if args.seeds else ([args.seed] if args.seed is not None else cfg.seeds)
    res = pipeline.ablate(cfg, args.data, args.source, args.prior, args.out, seeds, args.grid,
                          tuple(args.taus) if args.taus else pipeline.TAUS)
    for r in res["rows"]:
        print(f"{r['grid']:<6}{r['cell']:<16}{100 * r['mean_pck']:7.2f}{100 * r['median_pck']:7.2f}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sfpose", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", type=Path, help="run configuration JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path, required=True)
        if data:
            sp.add_argument("--data", type=Path, required=True, help="directory written by gen-data")

    sp = sub.add_parser("gen-data", help="generate source, target and aux pose sets")
    common(sp, data=False)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train-source", help="supervised training on the source domain")
    common(sp)
    sp.set_defaults(func=cmd_train_source)

    sp = sub.add_parser("train-prior", help="fit the pose prior on aux poses")
    common(sp)
    sp.add_argument("--exact-knn", action="store_true", help="brute-force distance labels")
    sp.set_defaults(func=cmd_train_prior)

    sp = sub.add_parser("adapt", help="source-free adaptation on unlabelled target images")
    common(sp)
    sp.add_argument("--source", type=Path, required=True)
    sp.add_argument("--prior", type=Path)
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("eval", help="PCK@0.05 table for a checkpoint")
    sp.add_argument("--model", type=Path)
    sp.add_argument("--run", type=Path, help="adapt output directory")
    sp.add_argument("--which", choices=("student", "teacher", "both"), default="teacher")
    sp.add_argument("--split", type=Path, required=True)
    sp.add_argument("--skeleton", type=Path)
    sp.add_argument("--out", type=Path)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("score-poses", help="prior score histogram for a pose file")
    sp.add_argument("--prior", type=Path, required=True)
    sp.add_argument("--poses", type=Path, required=True)
    sp.add_argument("--corrupt", type=float, metavar="KAPPA")
    sp.add_argument("--bins", type=int, default=40)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_score_poses)

    sp = sub.add_parser("ablate", help="loss-term and threshold grids over seeds")
    common(sp)
    sp.add_argument("--source", type=Path, required=True)
    sp.add_argument("--prior", type=Path, required=True)
    sp.add_argument("--grid", choices=("loss", "tau", "all"), default="all")
    sp.add_argument("--taus", type=float, nargs="+")
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except Exception as exc:    # one machine-readable line, non-zero exit
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
