import csv
import json

import pytest

from sfpose.cli import main
from sfpose.config import RunConfig
from sfpose.pipeline import TRACE_COLUMNS


def _run(*argv):
    assert main([str(a) for a in argv]) == 0, argv


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory, tiny_config_file):
    """The whole command chain, executed twice into separate roots."""
    roots = []
    for rep in ("a", "b"):
        r = tmp_path_factory.mktemp(f"run_{rep}")
        cfg = ["--config", tiny_config_file, "--seed", 3]
        _run("gen-data", *cfg, "--out", r / "data")
        _run("train-source", *cfg, "--data", r / "data", "--out", r / "source")
        _run("train-prior", *cfg, "--data", r / "data", "--out", r / "prior")
        _run("adapt", *cfg, "--data", r / "data", "--source", r / "source" / "model.ckpt",
             "--prior", r / "prior" / "prior.ckpt", "--out", r / "adapt")
        _run("score-poses", "--prior", r / "prior" / "prior.ckpt", "--poses", r / "data" / "aux" / "poses.jsonl",
             "--corrupt", 2, "--seed", 3, "--out", r / "scores")
        _run("ablate", *cfg, "--data", r / "data", "--source", r / "source" / "model.ckpt",
             "--prior", r / "prior" / "prior.ckpt", "--grid", "tau", "--taus", 0.5, 0.9, "--seeds", 0, 1,
             "--out", r / "ablate")
        roots.append(r)
    return roots


STAGES = ("data", "source", "prior", "adapt", "scores", "ablate")


def test_every_output_dir_has_one_manifest(pipeline_runs):
    root = pipeline_runs[0]
    for stage in STAGES:
        assert len(list((root / stage).glob("manifest.json"))) == 1


def test_reruns_are_bit_identical(pipeline_runs):
    a, b = pipeline_runs
    for stage in STAGES:
        ma = json.loads((a / stage / "manifest.json").read_text())
        mb = json.loads((b / stage / "manifest.json").read_text())
        assert ma["outputs"] == mb["outputs"], stage
        assert ma["config_hash"] == mb["config_hash"]


def test_gen_data_counts_and_label_separation(pipeline_runs):
    data = pipeline_runs[0] / "data"
    assert len((data / "source" / "train" / "index.txt").read_text().split()) == 48
    assert len((data / "target" / "test" / "index.txt").read_text().split()) == 24
    assert not (data / "target" / "train" / "poses.jsonl").exists()
    assert (data / "target" / "test" / "poses.jsonl").exists()
    assert sum(1 for _ in open(data / "aux" / "poses.jsonl")) == 200
    assert not list((data / "aux").glob("*.pgm"))


def test_default_config_sizes():
    cfg = RunConfig()
    assert (cfg.data.source.n_train, cfg.data.source.n_test, cfg.data.n_aux) == (2000, 500, 5000)


def test_trace_columns_and_length(pipeline_runs):
    rows = list(csv.DictReader(open(pipeline_runs[0] / "adapt" / "trace.csv")))
    assert tuple(rows[0].keys()) == TRACE_COLUMNS
    assert len(rows) == 2 * 2
    assert rows[1]["pck_teacher"] != "" and rows[0]["pck_teacher"] == ""


def test_histogram_csv(pipeline_runs):
    rows = list(csv.DictReader(open(pipeline_runs[0] / "scores" / "histogram.csv")))
    assert list(rows[0]) == ["bin_left", "count_clean", "count_corrupted"]
    assert sum(int(r["count_clean"]) for r in rows) == 200
    assert sum(int(r["count_corrupted"]) for r in rows) == 200
    assert (pipeline_runs[0] / "scores" / "histogram.svg").read_text().startswith("<svg")


def test_ablation_manifest_count(pipeline_runs):
    abl = pipeline_runs[0] / "ablate"
    assert len(list((abl / "cells").glob("*/manifest.json"))) == 2 * 2
    rows = list(csv.DictReader(open(abl / "ablation.csv")))
    assert [r["cell"] for r in rows] == ["source-only", "p=0.5", "p=0.9"]


def test_eval_both_tables(pipeline_runs, capsys):
    r = pipeline_runs[0]
    _run("eval", "--run", r / "adapt", "--which", "both", "--split", r / "data" / "target" / "test")
    out = capsys.readouterr().out
    assert "student" in out and "teacher" in out and "Avg." in out and "Sld." in out


def test_missing_checkpoint_is_machine_readable(pipeline_runs, capsys, tmp_path):
    r = pipeline_runs[0]
    code = main(["eval", "--model", str(tmp_path / "nope.ckpt"), "--split", str(r / "data" / "target" / "test")])
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert code != 0 and err["error"] == "FileNotFoundError" and "nope.ckpt" in err["message"]


def test_empty_pose_file_rejected(pipeline_runs, capsys, tmp_path):
    (tmp_path / "empty.jsonl").write_text("")
    code = main(["score-poses", "--prior", str(pipeline_runs[0] / "prior" / "prior.ckpt"),
                 "--poses", str(tmp_path / "empty.jsonl"), "--out", str(tmp_path / "o")])
    assert code != 0 and "empty" in json.loads(capsys.readouterr().err.strip())["message"]


def test_skeleton_mismatch_rejected(pipeline_runs, tmp_path, capsys, tiny_config_file):
    d = json.loads(tiny_config_file.read_text())
    d["model"]["num_keypoints"] = 5
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(d))
    code = main(["train-source", "--config", str(bad), "--data", str(pipeline_runs[0] / "data"),
                 "--out", str(tmp_path / "s")])
    assert code != 0 and "keypoints" in json.loads(capsys.readouterr().err.strip())["message"]


def test_config_roundtrip_and_unknown_keys(tmp_path):
    cfg = RunConfig()
    cfg.save(tmp_path / "c.json")
    assert RunConfig.load(tmp_path / "c.json").to_dict() == cfg.to_dict()
    d = cfg.to_dict()
    d["adapt"]["bogus"] = 1
    with pytest.raises(ValueError):
        RunConfig.from_dict(d)
