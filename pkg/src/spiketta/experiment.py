"""Experiment runner: evaluation loop, report files, sweeps and similarity histograms."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, formats, snn, trainer
from .config import ConfigError, ExperimentConfig, Method, apply_overrides, config_dict

log = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "sample_id",
    "label",
    "pred_before",
    "pred_after",
    "correct_before",
    "correct_after",
    "pre_loss",
    "post_loss",
    "pre_mean_sim",
    "post_mean_sim",
    "fallback",
)
HIST_COLUMNS = ("bin_low", "bin_high", "pre_count", "post_count")


def source_digest() -> str:
    """Version string plus a hash of the package sources."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


@dataclass
class RunReport:
    body: dict
    metadata: dict
    records: list = field(repr=False, default_factory=list)
    output_dir: Path | None = None

    @property
    def accuracy(self) -> float:
        return self.body["accuracy"]

    @property
    def noadapt_accuracy(self) -> float:
        return self.body["noadapt_accuracy"]

    @property
    def seconds_per_sample(self) -> float:
        return self.metadata["seconds_per_sample"]


def _num(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def _record(i, sid, label, pred, trace, seed):
    if trace is None:
        return {
            "sample_id": sid,
            "label": label,
            "pre_loss": None,
            "post_loss": None,
            "pre_mean_sim": None,
            "post_mean_sim": None,
            "pred_before": pred,
            "pred_after": pred,
            "fallback_flag": False,
            "seed": seed,
        }
    return {k: _num(v) for k, v in trace.to_json().items()}


def resolve_inputs(cfg: ExperimentConfig, params=None, data=None):
    if params is None:
        path = Path(cfg.checkpoint)
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        params, _ = formats.load_checkpoint(path)
    if data is None:
        if cfg.data.cache:
            path = Path(cfg.data.cache)
            if not path.is_file():
                raise FileNotFoundError(f"dataset cache not found: {path}")
            data = trainer.load_dataset(path)
        else:
            _, data = trainer.synth_dataset(cfg.dataset_spec(), cfg.data.seed)
    if cfg.data.limit:
        data = data.subset(np.arange(min(cfg.data.limit, len(data))))
    return params, data


def similarity_histogram(records, bins: int = 10) -> dict:
    """Equal-width histograms over [0, 1] of pre/post mean pairwise similarity."""
    pre = np.array([r["pre_mean_sim"] for r in records if r.get("pre_mean_sim") is not None], float)
    post = np.array([r["post_mean_sim"] for r in records if r.get("post_mean_sim") is not None], float)
    if len(pre) == 0 or len(post) == 0:
        raise ValueError("no similarity values to histogram")
    edges = np.linspace(0.0, 1.0, bins + 1)
    pre_counts, _ = np.histogram(np.clip(pre, 0, 1), edges)
    post_counts, _ = np.histogram(np.clip(post, 0, 1), edges)
    paired = [(r["pre_mean_sim"], r["post_mean_sim"]) for r in records if r.get("post_mean_sim") is not None]
    increased = sum(b > a for a, b in paired)
    return {
        "edges": edges.tolist(),
        "pre_counts": pre_counts.tolist(),
        "post_counts": post_counts.tolist(),
        "pre_mean": float(pre.mean()),
        "post_mean": float(post.mean()),
        "fraction_increased": increased / len(paired),
    }


def _metrics_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for r in records:
        row = [
            r["sample_id"],
            r["label"],
            r["pred_before"],
            r["pred_after"],
            int(r["pred_before"] == r["label"]),
            int(r["pred_after"] == r["label"]),
            r["pre_loss"],
            r["post_loss"],
            r["pre_mean_sim"],
            r["post_mean_sim"],
            int(bool(r["fallback_flag"])),
        ]
        w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
    return buf.getvalue()


def _hist_csv(hist) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HIST_COLUMNS)
    e = hist["edges"]
    for k in range(len(e) - 1):
        w.writerow([repr(e[k]), repr(e[k + 1]), hist["pre_counts"][k], hist["post_counts"][k]])
    return buf.getvalue()


def accuracy_from_records(records) -> float:
    return sum(r["pred_after"] == r["label"] for r in records) / len(records)


def run_experiment(cfg: ExperimentConfig, params=None, data=None, write: bool = True) -> RunReport:
    """Evaluate the test set one sample at a time; SPACE adapts a fresh copy per sample."""
    params, data = resolve_inputs(cfg, params, data)
    if len(data) == 0:
        raise ValueError("empty test set")
    corruption = (cfg.corruption.kind, cfg.corruption.severity) if cfg.corruption.severity > 0 else None
    adapt = cfg.adapt if cfg.method is Method.SPACE else None
    records = []

    def on_sample(i, pred, trace):
        records.append(_record(i, int(data.indices[i]), int(data.labels[i]), pred, trace, cfg.seed))

    t0 = time.perf_counter()
    result = trainer.evaluate(
        params, data, cfg.neuron, cfg.seed, corruption, adapt, cfg.policy(), on_sample, carry_state=cfg.carry_state
    )
    elapsed = time.perf_counter() - t0
    before = sum(r["pred_before"] == r["label"] for r in records) / len(records)
    body = {
        "config": config_dict(cfg),
        "method": cfg.method.value,
        "n_samples": len(records),
        "accuracy": result.accuracy,
        "noadapt_accuracy": before,
        "confusion": result.confusion.tolist(),
        "fallbacks": sum(bool(r["fallback_flag"]) for r in records),
        "software": source_digest(),
        "model_digest": params.digest(),
    }
    if adapt is not None:
        hist = similarity_histogram(records)
        body.update(
            mean_pre_similarity=hist["pre_mean"],
            mean_post_similarity=hist["post_mean"],
            fraction_similarity_increased=hist["fraction_increased"],
        )
    else:
        hist = None
    metadata = {
        "wall_seconds": elapsed,
        "seconds_per_sample": elapsed / len(records),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "host": platform.node(),
    }
    report = RunReport(body, metadata, records)
    if write:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps({"body": body, "metadata": metadata}, indent=2, sort_keys=True) + "\n")
        (out / "traces.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
        (out / "metrics.csv").write_text(_metrics_csv(records))
        if hist is not None:
            (out / "similarity_hist.csv").write_text(_hist_csv(hist))
        report.output_dir = out
    return report


SWEEP_AXES = {
    "eta": "adapt.eta",
    "M": "adapt.num_augments",
    "s": "adapt.augment_strength",
    "scope": "adapt.scope",
    "aggregation": "adapt.aggregation",
}


def sweep(base: ExperimentConfig, axis: str, values, params=None, data=None, write: bool = True) -> list[dict]:
    """One run per value of ``axis``; returns table rows (value, accuracy, NoAdapt accuracy, s/sample)."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    params, data = resolve_inputs(base, params, data)
    base = dataclasses.replace(base, data=dataclasses.replace(base.data, limit=0))
    rows = []
    for v in values:
        key = SWEEP_AXES[axis]
        cfg = apply_overrides(base, [(key, str(v), None)], source=f"sweep {axis}={v}")
        cfg = dataclasses.replace(cfg, output_dir=str(Path(base.output_dir) / f"{axis}={v}"))
        rep = run_experiment(cfg, params, data, write=write)
        rows.append(
            {
                "value": v,
                "accuracy": rep.accuracy,
                "noadapt_accuracy": rep.noadapt_accuracy,
                "seconds_per_sample": rep.seconds_per_sample,
                "report": rep,
            }
        )
    if write:
        out = Path(base.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = [f"{axis},accuracy,noadapt_accuracy,seconds_per_sample\n"]
        lines += [f"{r['value']},{r['accuracy']!r},{r['noadapt_accuracy']!r},{r['seconds_per_sample']:.6f}\n" for r in rows]
        (out / "sweep.csv").write_text("".join(lines))
    return rows


def read_run(directory) -> tuple[dict, list]:
    d = Path(directory)
    report = json.loads((d / "report.json").read_text())
    records = [json.loads(line) for line in (d / "traces.jsonl").read_text().splitlines() if line]
    return report, records
