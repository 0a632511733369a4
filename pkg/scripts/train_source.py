"""Train the default toy source model and write it where `spiketta run` looks for it.

    python scripts/train_source.py [--checkpoint runs/source.snnw] [--epochs 20] [--seed 0]
"""

import argparse
import time

from spiketta import formats, snn, trainer
from spiketta.config import ExperimentConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", default=ExperimentConfig().checkpoint)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = ExperimentConfig()
    train, test = trainer.synth_dataset(cfg.dataset_spec(), cfg.data.seed)
    t0 = time.perf_counter()
    res = trainer.train_source(train, snn.ArchConfig(), snn.LifNeuronConfig(), epochs=args.epochs, seed=args.seed, test=test)
    seconds = time.perf_counter() - t0
    formats.save_checkpoint(args.checkpoint, res.params, {"test_accuracy": res.test_accuracy, "seconds": seconds})
    print(f"clean test accuracy {res.test_accuracy:.3f} after {seconds:.0f}s -> {args.checkpoint}")


if __name__ == "__main__":
    main()
