#!/usr/bin/env python3
"""Ablation grid: pretraining init, VQ-decoder freezing, contrastive loss.

Usage: python3 scripts/run_ablation.py [workdir] [config.json]

Requires synth + train-vq artifacts in the workdir (they are created if
missing). Writes out/ablation.csv and prints the majority-vote directional
checks over the configured number of repeats.
"""

import sys
from pathlib import Path

from dyadmotion import pipeline
from dyadmotion.config import load_run_config

ROOT = Path(__file__).resolve().parent.parent


def main() -> None:
    workdir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("ablation_run")
    cfg_path = Path(sys.argv[2]) if len(sys.argv) > 2 else ROOT / "configs" / "default.json"
    cfg = load_run_config(cfg_path).resolve(workdir)

    pipeline.run_synth(cfg)
    for role in ("speaker", "listener"):
        if not (pipeline.vq_ckpt_dir(cfg, role) / "manifest.json").exists():
            pipeline.run_train_vq(cfg, role)

    csv_path = pipeline.run_ablate(cfg)
    print(csv_path.read_text())
    for name, ok in sorted(pipeline.ablation_majorities(csv_path).items()):
        print(f"{name}: {'yes' if ok else 'no'}")


if __name__ == "__main__":
    main()
