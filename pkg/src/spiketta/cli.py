"""Command-line entry point: ``spiketta {train,run,sweep,wilcoxon,report}``.

Any ExperimentConfig field can be overridden with its dotted key, e.g.
``--adapt.eta 0.1`` or ``--corruption.severity=3``. ``SPACE_SEED`` in the
environment overrides the top-level seed after all other sources.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import experiment, formats, snn, trainer
from .config import ConfigError, ExperimentConfig, apply_overrides, load_config, serialize_config
from .stats import UndefinedTestError, wilcoxon_signed_rank

log = logging.getLogger("spiketta")


def _split_overrides(extra: list[str]) -> list[tuple[str, str, None]]:
    items = []
    k = 0
    while k < len(extra):
        tok = extra[k]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            if k + 1 >= len(extra):
                raise ConfigError(f"missing value for --{key}")
            k += 1
            raw = extra[k]
        items.append((key, raw, None))
        k += 1
    return items


def build_config(config_path: str | None, extra: list[str], env=os.environ) -> ExperimentConfig:
    cfg = load_config(config_path) if config_path else ExperimentConfig()
    for key, raw, _ in _split_overrides(extra):
        cfg = apply_overrides(cfg, [(key, raw, None)], source=f"--{key}")
    if env.get("SPACE_SEED"):
        cfg = apply_overrides(cfg, [("seed", env["SPACE_SEED"], None)], source="SPACE_SEED")
    return cfg


def cmd_train(cfg: ExperimentConfig, args) -> int:
    train, test = trainer.synth_dataset(cfg.dataset_spec(), cfg.data.seed)
    t = cfg.train
    res = trainer.train_source(
        train,
        cfg.arch,
        cfg.neuron,
        epochs=t.epochs,
        lr=t.lr,
        seed=t.seed,
        batch_size=t.batch_size,
        test=test,
        logit_scale=t.logit_scale,
        surrogate_window=t.surrogate_window,
        cosine_decay=t.cosine_decay,
    )
    out = Path(cfg.checkpoint)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"train_accuracy": res.train_accuracy, "test_accuracy": res.test_accuracy, "history": res.history}
    formats.save_checkpoint(out, res.params, meta)
    if cfg.data.cache:
        trainer.save_dataset(cfg.data.cache, test)
    print(f"train accuracy {res.train_accuracy:.4f}  test accuracy {res.test_accuracy:.4f}  -> {out}")
    return 1 if res.diverged else 0


def cmd_run(cfg: ExperimentConfig, args) -> int:
    rep = experiment.run_experiment(cfg)
    b = rep.body
    print(f"{b['method']}: accuracy {b['accuracy']:.4f} (no-adapt {b['noadapt_accuracy']:.4f}) n={b['n_samples']}")
    print(f"written to {rep.output_dir}")
    return 0


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    rows = experiment.sweep(cfg, args.axis, values)
    print(f"{args.axis:>12} {'accuracy':>9} {'no-adapt':>9} {'s/sample':>9}")
    for r in rows:
        print(f"{r['value']:>12} {r['accuracy']:9.4f} {r['noadapt_accuracy']:9.4f} {r['seconds_per_sample']:9.4f}")
    return 0


def _read_column(path: str) -> list[float]:
    text = Path(path).read_text()
    return [float(tok) for tok in text.replace(",", " ").split()]


def cmd_wilcoxon(args) -> int:
    x = _read_column(args.x) if Path(args.x).is_file() else [float(v) for v in args.x.split(",")]
    y = None
    if args.y:
        y = _read_column(args.y) if Path(args.y).is_file() else [float(v) for v in args.y.split(",")]
    r = wilcoxon_signed_rank(x, y)
    print(f"W={r.statistic:g} n={r.n} method={r.method}")
    print(f"p(greater)={r.p_greater:.6g} p(less)={r.p_less:.6g} p(two-sided)={r.p_two_sided:.6g}")
    return 0


def cmd_report(args) -> int:
    report, records = experiment.read_run(args.directory)
    body = report["body"]
    recomputed = experiment.accuracy_from_records(records)
    ok = recomputed == body["accuracy"]
    print(f"method {body['method']}  samples {body['n_samples']}")
    print(f"accuracy {body['accuracy']:.4f}  no-adapt {body['noadapt_accuracy']:.4f}")
    if "mean_pre_similarity" in body:
        print(
            f"similarity pre {body['mean_pre_similarity']:.4f} post {body['mean_post_similarity']:.4f}"
            f"  increased on {body['fraction_similarity_increased']:.1%}"
        )
    print(f"seconds/sample {report['metadata']['seconds_per_sample']:.4f}  software {body['software']}")
    print(f"accuracy recomputed from traces: {'matches' if ok else 'MISMATCH'}")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="spiketta", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [("train", "train a source model"), ("run", "evaluate one configuration")]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p = sub.add_parser("sweep", help="run one configuration per axis value")
    p.add_argument("--config")
    p.add_argument("--axis", required=True, choices=sorted(experiment.SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--print-config", action="store_true")
    p = sub.add_parser("wilcoxon", help="signed-rank test on paired values")
    p.add_argument("x", help="comma-separated values or a file of numbers")
    p.add_argument("y", nargs="?", help="second sample (optional)")
    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("directory")

    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "wilcoxon":
            if extra:
                parser.error(f"unrecognized arguments: {' '.join(extra)}")
            return cmd_wilcoxon(args)
        if args.command == "report":
            if extra:
                parser.error(f"unrecognized arguments: {' '.join(extra)}")
            return cmd_report(args)
        cfg = build_config(args.config, extra)
        if args.print_config:
            sys.stdout.write(serialize_config(cfg))
            return 0
        return {"train": cmd_train, "run": cmd_run, "sweep": cmd_sweep}[args.command](cfg, args)
    except (ConfigError, FileNotFoundError, UndefinedTestError, snn.IntegrityError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
