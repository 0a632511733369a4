import csv
import dataclasses
import json

import numpy as np
import pytest

from spiketta import cli, experiment, formats, trainer
from spiketta.config import ConfigError, ExperimentConfig, Method, parse_config


def small_cfg(tmp_path, **adapt):
    cfg = parse_config("data.limit=6\nadapt.num_augments=4\nadapt.eta=0.01\n")
    if adapt:
        cfg = dataclasses.replace(cfg, adapt=dataclasses.replace(cfg.adapt, **adapt))
    return dataclasses.replace(cfg, output_dir=str(tmp_path / "run"))


def test_noadapt_run_matches_evaluate(tmp_path, source_model, toy_data):
    params, _ = source_model
    cfg = dataclasses.replace(small_cfg(tmp_path), method=Method.NO_ADAPT)
    rep = experiment.run_experiment(cfg, params, toy_data[1])
    sub = toy_data[1].subset(np.arange(6))
    direct = trainer.evaluate(params, sub, cfg.neuron, cfg.seed, (cfg.corruption.kind, cfg.corruption.severity))
    assert rep.accuracy == direct.accuracy == rep.noadapt_accuracy
    assert [r["pred_after"] for r in rep.records] == direct.predictions.tolist()
    assert not (tmp_path / "run" / "similarity_hist.csv").exists()


def test_eta_zero_space_equals_noadapt(tmp_path, source_model, toy_data):
    params, _ = source_model
    space_run = experiment.run_experiment(small_cfg(tmp_path, eta=0.0), params, toy_data[1], write=False)
    cfg = dataclasses.replace(small_cfg(tmp_path), method=Method.NO_ADAPT)
    plain = experiment.run_experiment(cfg, params, toy_data[1], write=False)
    assert [r["pred_after"] for r in space_run.records] == [r["pred_after"] for r in plain.records]
    assert space_run.accuracy == plain.accuracy


def test_run_files_are_consistent(tmp_path, source_model, toy_data):
    params, _ = source_model
    rep = experiment.run_experiment(small_cfg(tmp_path), params, toy_data[1])
    out = tmp_path / "run"
    report, records = experiment.read_run(out)
    assert set(report) == {"body", "metadata"}
    assert "timestamp" not in report["body"] and "host" in report["metadata"]
    assert experiment.accuracy_from_records(records) == report["body"]["accuracy"]
    assert report["body"]["model_digest"] == params.digest()
    with open(out / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == experiment.METRICS_COLUMNS and len(rows) == 6
    assert sum(int(r["correct_after"]) for r in rows) / 6 == rep.accuracy
    with open(out / "similarity_hist.csv", newline="") as fh:
        hist = list(csv.DictReader(fh))
    assert sum(int(h["pre_count"]) for h in hist) == sum(int(h["post_count"]) for h in hist) == 6


def test_runs_are_byte_identical(tmp_path, source_model, toy_data):
    params, _ = source_model
    a = dataclasses.replace(small_cfg(tmp_path), output_dir=str(tmp_path / "a"))
    b = dataclasses.replace(a, output_dir=str(tmp_path / "b"))
    experiment.run_experiment(a, params, toy_data[1])
    experiment.run_experiment(b, params, toy_data[1])
    for name in ("traces.jsonl", "metrics.csv", "similarity_hist.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_similarity_histogram_counts():
    recs = [{"pre_mean_sim": a, "post_mean_sim": b} for a, b in [(0.05, 0.5), (0.5, 0.45), (1.0, 1.0)]]
    h = experiment.similarity_histogram(recs, bins=4)
    assert h["pre_counts"] == [1, 0, 1, 1] and h["post_counts"] == [0, 1, 1, 1]
    assert h["fraction_increased"] == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        experiment.similarity_histogram([])


def test_sweep_writes_table(tmp_path, source_model, toy_data):
    params, _ = source_model
    rows = experiment.sweep(small_cfg(tmp_path), "M", [2, 3], params, toy_data[1].subset(np.arange(3)))
    assert [r["value"] for r in rows] == [2, 3]
    lines = (tmp_path / "run" / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("M,accuracy") and len(lines) == 3
    with pytest.raises(ConfigError):
        experiment.sweep(small_cfg(tmp_path), "depth", [1], params, toy_data[1])


def test_cli_overrides_and_env_seed(capsys):
    cfg = cli.build_config(None, ["--adapt.eta", "0.2", "--corruption.severity=3"], env={"SPACE_SEED": "11"})
    assert cfg.adapt.eta == 0.2 and cfg.corruption.severity == 3 and cfg.seed == 11
    assert cli.build_config(None, ["--seed", "4"], env={}).seed == 4
    assert cli.main(["run", "--print-config", "--adapt.num_augments", "8"]) == 0
    assert "adapt.num_augments=8" in capsys.readouterr().out
    assert cli.main(["run", "--adapt.bogus", "1"]) == 2
    assert "--adapt.bogus" in capsys.readouterr().err


def test_cli_run_and_report(tmp_path, source_model, capsys):
    params, _ = source_model
    ckpt = tmp_path / "m.snnw"
    formats.save_checkpoint(ckpt, params)
    out = tmp_path / "out"
    argv = ["run", f"--checkpoint={ckpt}", f"--output_dir={out}", "--data.limit", "3", "--adapt.num_augments", "3"]
    assert cli.main(argv) == 0
    assert (out / "traces.jsonl").is_file()
    capsys.readouterr()
    assert cli.main(["report", str(out)]) == 0
    assert "matches" in capsys.readouterr().out


def test_cli_missing_checkpoint_fails(tmp_path, capsys):
    assert cli.main(["run", f"--checkpoint={tmp_path / 'none.snnw'}"]) == 2
    assert "checkpoint not found" in capsys.readouterr().err


def test_cli_wilcoxon(capsys):
    assert cli.main(["wilcoxon", "1,2,3,4,5"]) == 0
    out = capsys.readouterr().out
    assert "W=15" in out and "p(greater)=0.03125" in out
    assert cli.main(["wilcoxon", "0,0,0"]) == 2


def test_report_json_is_valid(tmp_path, source_model, toy_data):
    params, _ = source_model
    experiment.run_experiment(small_cfg(tmp_path), params, toy_data[1])
    doc = json.loads((tmp_path / "run" / "report.json").read_text())
    assert doc["body"]["n_samples"] == 6 and doc["body"]["method"] == "space"
    assert doc["body"]["config"]["adapt.num_augments"] == "4"
