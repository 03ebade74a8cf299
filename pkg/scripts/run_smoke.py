#!/usr/bin/env python3
"""Run the whole pipeline on the tiny smoke configuration.

Usage: python3 scripts/run_smoke.py [workdir]

Generates data, trains both codebooks, pretrains, fine-tunes the listener
generator, generates on the test split (model + all baselines), evaluates
everything, and writes a summary CSV under <workdir>/out.
"""

import sys
from pathlib import Path

from dyadmotion import pipeline
from dyadmotion.config import load_run_config

ROOT = Path(__file__).resolve().parent.parent


def main() -> None:
    workdir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("smoke_run")
    cfg = load_run_config(ROOT / "configs" / "smoke.json").resolve(workdir)

    pipeline.run_synth(cfg)
    for role in ("speaker", "listener"):
        pipeline.run_train_vq(cfg, role)
    pipeline.run_pretrain(cfg)
    pipeline.run_finetune(cfg, "listener")

    reports = []
    for source in pipeline.BASELINES:
        gen_dir = pipeline.run_generate(cfg, task="listener", split="test", source=source)
        reports.append(pipeline.run_evaluate(cfg, gen_dir))
    summary = pipeline.run_report(cfg, reports, plots=False)
    print(summary.read_text())


if __name__ == "__main__":
    main()
