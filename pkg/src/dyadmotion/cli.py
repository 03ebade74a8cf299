"""Command-line interface for the dyadic motion pipeline.

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite
artifact, 4 numerical divergence during training.
"""

from __future__ import annotations

import functools
import sys
from pathlib import Path

import click

from . import pipeline
from .config import artifact_root, load_run_config
from .errors import ConfigError, DivergenceError, MissingPrerequisiteError


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except MissingPrerequisiteError as exc:
            click.echo(f"missing prerequisite: {exc}", err=True)
            sys.exit(3)
        except FileNotFoundError as exc:
            click.echo(f"missing prerequisite: {exc}", err=True)
            sys.exit(3)
        except DivergenceError as exc:
            click.echo(f"divergence: {exc}", err=True)
            sys.exit(4)

    return wrapper


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None, help="Run config JSON.")
@click.option("--seed", type=int, default=None, help="Override the global seed.")
@click.option("--out", type=click.Path(), default=None, help="Override the output directory.")
@click.option("--no-plots", is_flag=True, help="Skip plot generation in `report`.")
@click.option("--force", is_flag=True, help="Overwrite or ignore stale-artifact checks.")
@click.pass_context
@_handle_errors
def main(ctx, config_path, seed, out, no_plots, force):
    """Dyadic motion generation pipeline (synthetic data, VQ codebooks, masked pretraining)."""
    cfg = load_run_config(config_path, overrides={"seed": seed, "out_dir": out})
    ctx.obj = {
        "cfg": cfg.resolve(artifact_root()),
        "plots": not no_plots,
        "force": force,
    }


@main.command()
@click.pass_obj
@_handle_errors
def synth(obj):
    """Generate the synthetic dyad corpus and write train/val/test splits."""
    manifests = pipeline.run_synth(obj["cfg"], force=obj["force"])
    for split, path in sorted(manifests.items()):
        click.echo(f"{split}: {path}")


@main.command("train-vq")
@click.argument("role", type=click.Choice(["speaker", "listener"]))
@click.pass_obj
@_handle_errors
def train_vq(obj, role):
    """Train the motion codebook for ROLE on the train split."""
    ckpt = pipeline.run_train_vq(obj["cfg"], role)
    click.echo(f"saved {ckpt}")


@main.command()
@click.pass_obj
@_handle_errors
def pretrain(obj):
    """Masked dyadic pretraining on top of the trained codebooks."""
    ckpt = pipeline.run_pretrain(obj["cfg"])
    click.echo(f"saved {ckpt}")


@main.command()
@click.argument("task", type=click.Choice(["listener", "speaker"]))
@click.pass_obj
@_handle_errors
def finetune(obj, task):
    """Fine-tune the pretrained model for TASK generation."""
    ckpt = pipeline.run_finetune(obj["cfg"], task)
    click.echo(f"saved {ckpt}")


@main.command()
@click.option("--task", type=click.Choice(["listener", "speaker"]), default="listener")
@click.option("--split", type=click.Choice(list(pipeline.SPLITS)), default="test")
@click.option(
    "--source",
    type=click.Choice(list(pipeline.BASELINES)),
    default="model",
    help="Generate from the fine-tuned model or a baseline.",
)
@click.option("--checkpoint", type=click.Path(), default=None, help="Generator checkpoint dir.")
@click.pass_obj
@_handle_errors
def generate(obj, task, split, source, checkpoint):
    """Generate motion for every clip of a split."""
    out = pipeline.run_generate(
        obj["cfg"],
        task=task,
        split=split,
        source=source,
        ckpt=Path(checkpoint) if checkpoint else None,
    )
    click.echo(f"wrote {out}")


@main.command()
@click.argument("generated_dir", type=click.Path())
@click.pass_obj
@_handle_errors
def evaluate(obj, generated_dir):
    """Score a generated directory against its ground-truth split."""
    path = pipeline.run_evaluate(obj["cfg"], Path(generated_dir), force=obj["force"])
    click.echo(f"wrote {path}")


@main.command()
@click.argument("reports", type=click.Path(), nargs=-1)
@click.pass_obj
@_handle_errors
def report(obj, reports):
    """Aggregate metric report JSONs into a summary CSV (and plots)."""
    path = pipeline.run_report(obj["cfg"], list(reports), plots=obj["plots"])
    click.echo(f"wrote {path}")


@main.command()
@click.pass_obj
@_handle_errors
def ablate(obj):
    """Run the ablation grid (init, VQ-decoder freezing, contrastive loss)."""
    path = pipeline.run_ablate(obj["cfg"])
    majorities = pipeline.ablation_majorities(path)
    click.echo(f"wrote {path}")
    for name, ok in sorted(majorities.items()):
        click.echo(f"{name}: {'yes' if ok else 'no'}")


if __name__ == "__main__":
    main()
