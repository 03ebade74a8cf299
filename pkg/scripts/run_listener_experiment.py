#!/usr/bin/env python3
"""Full listener-generation experiment with the default configuration.

Usage: python3 scripts/run_listener_experiment.py [workdir]

Trains codebooks and the dyadic model, fine-tunes the listener generator,
then scores the model against the random, nearest-motion, and mirror
baselines on the held-out test split. Writes report_summary.csv (and bar
plots if matplotlib is installed) under <workdir>/out.
"""

import sys
from pathlib import Path

from dyadmotion import pipeline
from dyadmotion.config import load_run_config

ROOT = Path(__file__).resolve().parent.parent


def main() -> None:
    workdir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("listener_run")
    cfg = load_run_config(ROOT / "configs" / "default.json").resolve(workdir)

    pipeline.run_synth(cfg)
    for role in ("speaker", "listener"):
        print(f"training VQ codebook: {role}")
        pipeline.run_train_vq(cfg, role)
    print("pretraining")
    pipeline.run_pretrain(cfg)
    print("fine-tuning listener generator")
    pipeline.run_finetune(cfg, "listener")

    reports = []
    for source in pipeline.BASELINES:
        gen_dir = pipeline.run_generate(cfg, task="listener", split="test", source=source)
        reports.append(pipeline.run_evaluate(cfg, gen_dir))
    summary = pipeline.run_report(cfg, reports)
    print(summary.read_text())


if __name__ == "__main__":
    main()
