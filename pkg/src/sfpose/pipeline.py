"""Pipeline stages behind the command line: each writes one output directory with a manifest."""
from __future__ import annotations

import csv
import dataclasses
import io as _io
import json
import logging
import statistics
import time
from pathlib import Path

import numpy as np

from . import prior as prior_mod
from .adapt import run_adaptation
from .config import RunConfig
from .io import canonical_json, config_hash, sha256_file, tree_hashes, write_manifest
from .model import PoseNetConfig, load_model, predict, save_model
from .pose import Skeleton, pck, pose_to_orientations, read_poses, stack_poses, write_poses
from .svg import histogram_overlay, line_plot
from .synth import Split, aux_records, generate_domain, make_shifted_pair, read_split, sample_aux_poses, write_domain
from .train import decode_image_coords, evaluate, train_source

log = logging.getLogger(__name__)

GROUP_COLUMNS = ("Sld.", "Elb.", "Wrist", "Hip", "Knee", "Ankle")
TRACE_COLUMNS = ("step", "epoch", "L_out", "L_feat", "L_prior", "total", "kept_fraction", "tau",
                 "pck_student", "pck_teacher")


class PipelineError(RuntimeError):
    pass


# -- small helpers ---------------------------------------------------------------
def write_csv(path: Path, rows: list[dict], columns) -> None:
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in columns})
    Path(path).write_text(buf.getvalue())


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _require(path: Path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _input_hashes(**paths) -> dict:
    out = {}
    for name, p in paths.items():
        if p is None:
            continue
        p = Path(p)
        if p.is_dir():
            out[name] = {"path": str(p), "sha256": config_hash(tree_hashes(p))}
        else:
            out[name] = {"path": str(p), "sha256": sha256_file(p)}
    return out


def _finish(out: Path, command: str, cfg: dict, seed: int, inputs: dict, t0: float) -> dict:
    return write_manifest(out, command, cfg, seed, inputs, {"seconds": round(time.time() - t0, 3)})


def load_skeleton(data_dir: Path) -> Skeleton:
    return Skeleton.load(_require(Path(data_dir) / "source" / "skeleton.json", "skeleton file"))


def check_model_skeleton(model_cfg: PoseNetConfig, skeleton: Skeleton) -> None:
    if model_cfg.num_keypoints != skeleton.K:
        raise PipelineError(f"model predicts {model_cfg.num_keypoints} keypoints but the skeleton has {skeleton.K}")


LABEL_WIDTH = 22


def pck_table(result: dict, label: str = "") -> str:
    head = f"{'model':<{LABEL_WIDTH}}" + "".join(f"{c:>7}" for c in GROUP_COLUMNS) + f"{'Avg.':>7}"
    row = f"{label:<{LABEL_WIDTH}}" + "".join(f"{100 * result['groups'].get(c, float('nan')):7.1f}" for c in GROUP_COLUMNS)
    return head + "\n" + row + f"{100 * result['avg']:7.1f}"


# -- stages ------------------------------------------------------------------------
def gen_data(cfg: RunConfig, out: Path, seed: int) -> dict:
    """Source (labelled), target (train unlabelled, test labelled) and pose-only aux sets."""
    t0 = time.time()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    src_spec = dataclasses.replace(cfg.data.source, seed=seed)
    src_spec, tgt_spec = make_shifted_pair(src_spec, cfg.shift_config())
    from .pose import default_skeleton
    sk = default_skeleton()
    write_domain(out / "source", src_spec, generate_domain(src_spec, sk), sk)
    write_domain(out / "target", tgt_spec, generate_domain(tgt_spec, sk), sk, unlabeled=("train",))
    (out / "aux").mkdir(exist_ok=True)
    aux = sample_aux_poses(src_spec, cfg.data.n_aux, cfg.data.aux_seed + seed, sk)
    write_poses(out / "aux" / "poses.jsonl", aux_records(aux))
    sk.save(out / "aux" / "skeleton.json")
    return _finish(out, "gen-data", cfg.to_dict(), seed, {}, t0)


def stage_train_source(cfg: RunConfig, data: Path, out: Path, seed: int) -> dict:
    t0 = time.time()
    data, out = Path(data), Path(out)
    train = read_split(_require(data / "source" / "train", "source train split"))
    test = read_split(_require(data / "source" / "test", "source test split"))
    sk = load_skeleton(data)
    check_model_skeleton(cfg.model, sk)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = dataclasses.replace(cfg.source_train, seed=seed)
    params, trace = train_source(cfg.model, train, tcfg)
    save_model(out / "model.ckpt", cfg.model, params, {"stage": "source", "seed": seed})
    write_csv(out / "trace.csv", [{"epoch": i, "loss": v} for i, v in enumerate(trace)], ("epoch", "loss"))
    res = evaluate(cfg.model, params, test, sk)
    _write_metrics(out / "metrics.json", {"source_test": res})
    return _finish(out, "train-source", cfg.to_dict(), seed, _input_hashes(data=data), t0)


def stage_train_prior(cfg: RunConfig, data: Path, out: Path, seed: int, exact_knn: bool = False) -> dict:
    t0 = time.time()
    data, out = Path(data), Path(out)
    sk = Skeleton.load(_require(data / "aux" / "skeleton.json", "aux skeleton"))
    coords, _ = stack_poses(read_poses(_require(data / "aux" / "poses.jsonl", "aux pose file")))
    if len(coords) == 0:
        raise PipelineError("aux pose file is empty")
    out.mkdir(parents=True, exist_ok=True)
    tcfg = dataclasses.replace(cfg.prior_train, seed=seed, exact_knn=exact_knn or cfg.prior_train.exact_knn)
    clean = pose_to_orientations(coords, sk)
    params, trace, pool = prior_mod.train_prior(clean, sk, cfg.prior, tcfg)
    prior_mod.save_prior(out / "prior.ckpt", params, cfg.prior, sk, {"seed": seed})
    prior_mod.write_labeled(out / "labeled.bin", pool.theta, pool.distance)
    write_csv(out / "trace.csv", [{"epoch": i, "loss": v} for i, v in enumerate(trace)], ("epoch", "loss"))
    scores = prior_mod.score_np(params, pool.theta, sk)
    summary = {f"kappa_{int(k)}" if k else "clean": float(scores[pool.kappa == k].mean())
               for k in (0.0,) + prior_mod.KAPPAS}
    _write_metrics(out / "metrics.json", {"mean_score": summary, "final_loss": trace[-1] if trace else None})
    cfg_d = cfg.to_dict()
    cfg_d["prior_train"]["exact_knn"] = tcfg.exact_knn
    return _finish(out, "train-prior", cfg_d, seed, _input_hashes(data=data), t0)


def _load_prior_for(path: Path, sk: Skeleton):
    params, pcfg, psk, _ = prior_mod.load_prior(_require(path, "prior checkpoint"))
    if psk.to_dict() != sk.to_dict():
        raise PipelineError("prior skeleton does not match the data skeleton")
    return prior_mod.frozen(params)


def stage_adapt(cfg: RunConfig, data: Path, source: Path, prior: Path | None, out: Path, seed: int,
                overrides: dict | None = None, eval_every_epoch: bool = True) -> dict:
    """Adapt a source checkpoint on unlabelled target images; target test labels are for reporting only."""
    t0 = time.time()
    data, out = Path(data), Path(out)
    overrides = overrides or {}
    mcfg, params, _ = load_model(_require(source, "source checkpoint"))
    sk = load_skeleton(data)
    check_model_skeleton(mcfg, sk)
    acfg = cfg.adapt_config(seed, **overrides)
    pparams = _load_prior_for(prior, sk) if prior is not None and acfg.lambda_prior > 0 else None
    if acfg.lambda_prior > 0 and pparams is None:
        raise PipelineError("lambda_prior > 0 needs a prior checkpoint (--prior)")
    target = read_split(_require(data / "target" / "train", "target train split"), with_labels=False)
    test = read_split(_require(data / "target" / "test", "target test split"))
    out.mkdir(parents=True, exist_ok=True)
    state, trace, epochs = run_adaptation(mcfg, params, target.float_images(), acfg, sk, pparams,
                                          test if eval_every_epoch else None)
    save_model(out / "student.ckpt", mcfg, state.student, {"stage": "adapt", "which": "student", "seed": seed})
    save_model(out / "teacher.ckpt", mcfg, state.teacher, {"stage": "adapt", "which": "teacher", "seed": seed})
    last = {}
    for rec in epochs:
        last[rec["epoch"]] = rec
    rows = []
    for i, t in enumerate(trace):
        row = dict(t)
        end_of_epoch = i + 1 == len(trace) or trace[i + 1]["epoch"] != t["epoch"]
        if end_of_epoch and t["epoch"] in last:
            row.update({k: v for k, v in last[t["epoch"]].items() if k.startswith("pck")})
        rows.append(row)
    write_csv(out / "trace.csv", rows, TRACE_COLUMNS)
    final = {w: evaluate(mcfg, s, test, sk) for w, s in (("student", state.student), ("teacher", state.teacher))}
    source_only = evaluate(mcfg, params, test, sk)
    _write_metrics(out / "metrics.json", {"source_only": source_only, "student": final["student"],
                                          "teacher": final["teacher"], "counters": state.counters,
                                          "adapt": dataclasses.asdict(acfg)})
    if eval_every_epoch and epochs:
        ep = np.array([r["epoch"] for r in epochs], float)
        series = {w: (ep, np.array([r[f"pck_{w}"] for r in epochs])) for w in ("student", "teacher")}
        series["source-only"] = (ep, np.full(len(ep), source_only["avg"]))
        (out / "pck.svg").write_text(line_plot(series, "target PCK@0.05 during adaptation", "epoch", "PCK"))
    cfg_d = cfg.to_dict()
    cfg_d["adapt"] = {k: v for k, v in dataclasses.asdict(acfg).items() if k != "augment"}
    return _finish(out, "adapt", cfg_d, seed, _input_hashes(data=data, source=source, prior=prior), t0)


def stage_eval(model: Path, split: Path, skeleton: Path | None = None) -> dict:
    mcfg, params, _ = load_model(_require(model, "model checkpoint"))
    split = Path(split)
    data = read_split(_require(split, "evaluation split"))
    if data.coords.shape[1] == 0:
        raise PipelineError(f"{split} has no labels to evaluate against")
    sk_path = Path(skeleton) if skeleton else split.parent / "skeleton.json"
    sk = Skeleton.load(_require(sk_path, "skeleton file"))
    check_model_skeleton(mcfg, sk)
    return evaluate(mcfg, params, data, sk)


def score_poses(prior_ckpt: Path, poses: Path, out: Path, kappa: float | None, seed: int,
                bins: int = 40, mode: str = "componentwise") -> dict:
    t0 = time.time()
    out = Path(out)
    params, _, sk, _ = prior_mod.load_prior(_require(prior_ckpt, "prior checkpoint"))
    recs = read_poses(_require(poses, "pose file"))
    if not recs:
        raise PipelineError(f"pose file {poses} is empty")
    coords, _ = stack_poses(recs)
    clean = pose_to_orientations(coords, sk)
    s_clean = prior_mod.score_np(params, clean, sk)
    s_bad = None
    if kappa is not None:
        noisy = prior_mod.corrupt(clean, np.random.default_rng(seed), kappa, mode)
        s_bad = prior_mod.score_np(params, noisy, sk)
    out.mkdir(parents=True, exist_ok=True)
    rows = [{"image_id": r.image_id, "score_clean": a, "score_corrupted": "" if s_bad is None else s_bad[i]}
            for i, (r, a) in enumerate(zip(recs, s_clean))]
    write_csv(out / "scores.csv", rows, ("image_id", "score_clean", "score_corrupted"))
    hi = float(max(s_clean.max(), s_bad.max() if s_bad is not None else 0.0)) or 1.0
    edges = np.linspace(0.0, hi * (1 + 1e-9), bins + 1)
    c_clean = np.histogram(s_clean, edges)[0]
    c_bad = np.histogram(s_bad, edges)[0] if s_bad is not None else np.zeros(bins, int)
    write_csv(out / "histogram.csv",
              [{"bin_left": e, "count_clean": int(a), "count_corrupted": int(b)}
               for e, a, b in zip(edges[:-1], c_clean, c_bad)], ("bin_left", "count_clean", "count_corrupted"))
    counts = {"clean": c_clean}
    if s_bad is not None:
        counts[f"corrupted (kappa={kappa:g})"] = c_bad
    (out / "histogram.svg").write_text(histogram_overlay(edges, counts, "prior scores", "g(theta)", "poses"))
    summary = {"n": len(recs), "mean_clean": float(s_clean.mean()),
               "mean_corrupted": None if s_bad is None else float(s_bad.mean())}
    _write_metrics(out / "metrics.json", summary)
    return _finish(out, "score-poses", {"kappa": kappa, "bins": bins, "mode": mode}, seed,
                   _input_hashes(prior=prior_ckpt, poses=poses), t0)


# -- ablation -------------------------------------------------------------------------
LOSS_GRID = (("L_out", {"lambda_feat": 0.0, "lambda_prior": 0.0}),
             ("L_out+L_feat", {"lambda_prior": 0.0}),
             ("full", {}))
TAUS = (0.1, 0.3, 0.5, 0.7, 0.9)


def ablation_cells(cfg: RunConfig, grid: str = "all", taus=TAUS) -> list[tuple[str, str, dict]]:
    """(grid, label, overrides) rows; rows whose effective adapt config coincides share one run."""
    rows = []
    if grid in ("loss", "all"):
        rows += [("loss", name, ov) for name, ov in LOSS_GRID]
    if grid in ("tau", "all"):
        rows += [("tau", f"p={p:g}", {"p": float(p)}) for p in taus]
    return rows


def _cell_key(cfg: RunConfig, overrides: dict) -> str:
    a = dataclasses.asdict(cfg.adapt_config(0, **overrides))
    return config_hash(a)[:10]


def ablate(cfg: RunConfig, data: Path, source: Path, prior: Path, out: Path, seeds: list[int],
           grid: str = "all", taus=TAUS) -> dict:
    t0 = time.time()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ablation_cells(cfg, grid, taus)
    mcfg, params, _ = load_model(_require(source, "source checkpoint"))
    sk = load_skeleton(data)
    test = read_split(_require(Path(data) / "target" / "test", "target test split"))
    source_only = evaluate(mcfg, params, test, sk)["avg"]
    results: dict[str, dict[int, float]] = {}
    for _, label, ov in rows:
        key = _cell_key(cfg, ov)
        if key in results:
            continue
        results[key] = {}
        for seed in seeds:
            cell = out / "cells" / f"{key}_seed{seed}"
            metrics = cell / "metrics.json"
            if not metrics.exists():
                log.info("ablation cell %s (%s) seed %d", label, key, seed)
                stage_adapt(cfg, data, source, prior, cell, seed, ov, eval_every_epoch=False)
            results[key][seed] = json.loads(metrics.read_text())["teacher"]["avg"]
    table = [{"grid": "none", "cell": "source-only", "p": "", "lambda_feat": "", "lambda_prior": "",
              "run": "", "mean_pck": source_only, "median_pck": source_only,
              **{f"seed{s}": source_only for s in seeds}}]
    for g, label, ov in rows:
        key = _cell_key(cfg, ov)
        a = cfg.adapt_config(0, **ov)
        vals = [results[key][s] for s in seeds]
        table.append({"grid": g, "cell": label, "p": a.p, "lambda_feat": a.lambda_feat,
                      "lambda_prior": a.lambda_prior, "run": key, "mean_pck": float(np.mean(vals)),
                      "median_pck": float(statistics.median(vals)), **{f"seed{s}": results[key][s] for s in seeds}})
    cols = ["grid", "cell", "p", "lambda_feat", "lambda_prior", "run", "mean_pck", "median_pck"] + \
           [f"seed{s}" for s in seeds]
    write_csv(out / "ablation.csv", table, cols)
    cfg_d = cfg.to_dict()
    cfg_d["ablate"] = {"grid": grid, "taus": list(taus), "seeds": list(seeds)}
    _finish(out, "ablate", cfg_d, seeds[0] if seeds else 0, _input_hashes(data=data, source=source, prior=prior), t0)
    return {"rows": table, "source_only": source_only}


def _write_metrics(path: Path, obj: dict) -> None:
    Path(path).write_text(json.dumps(json.loads(canonical_json(_clean(obj))), indent=1, sort_keys=True) + "\n")


def _clean(o):
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, np.ndarray):
        return [_clean(v) for v in o.tolist()]
    if isinstance(o, float) and not np.isfinite(o):
        return None
    return o
