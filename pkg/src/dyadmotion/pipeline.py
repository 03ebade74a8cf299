"""End-to-end pipeline stages: synth -> VQ -> pretrain -> finetune -> generate
-> evaluate, plus the ablation grid.

Every stage is a plain function over a :class:`RunConfig` so the CLI stays a
thin shell and tests can drive the pipeline directly. All artifacts are
written deterministically (sorted-key JSON, no timestamps) so a rerun with
the same config produces byte-identical outputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import torch

from .config import RunConfig
from .data import (
    DyadicSample,
    MotionSequence,
    load_corpus,
    load_tensor_file,
    save_corpus,
    save_tensor_file,
    synth_dyads,
)
from .errors import ConfigError, MissingPrerequisiteError
from .finetune import (
    GeneratorModel,
    baseline_mirror,
    baseline_nearest_motion,
    baseline_random,
    finetune_listener,
    finetune_speaker,
    generate_listener,
    generate_speaker,
)
from .metrics import MetricReport, evaluate
from .pretrain import (
    DIMModel,
    pretrain,
    load_dim_checkpoint,
    save_dim_checkpoint,
    write_loss_csv,
)
from .vq import load_vq_checkpoint, save_vq_checkpoint, train_vq

SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# Hashing helpers
# ---------------------------------------------------------------------------


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def split_manifest(cfg: RunConfig, split: str) -> Path:
    if split not in SPLITS:
        raise ConfigError(f"unknown split '{split}'")
    return Path(cfg.data_dir) / split / f"manifest_{split}.json"


def data_hash(cfg: RunConfig, split: str) -> str:
    """Content hash of one split: manifest plus every tensor file it indexes."""
    manifest = split_manifest(cfg, split)
    if not manifest.exists():
        raise MissingPrerequisiteError(f"no {split} split at {manifest}; run synth first")
    h = hashlib.sha256(manifest.read_bytes())
    entries = json.loads(manifest.read_text())["samples"]
    for e in entries:
        for key in ("speaker", "listener", "audio"):
            h.update((manifest.parent / e[key]).read_bytes())
    return h.hexdigest()[:16]


def load_split(cfg: RunConfig, split: str) -> list[DyadicSample]:
    return load_corpus(split_manifest(cfg, split))


# ---------------------------------------------------------------------------
# Stage: synth
# ---------------------------------------------------------------------------


def run_synth(cfg: RunConfig, force: bool = False) -> dict[str, Path]:
    """Generate the synthetic corpus and write train/val/test splits."""
    total = cfg.n_train + cfg.n_val + cfg.n_test
    if total < 1:
        raise ConfigError("n_train + n_val + n_test must be >= 1")
    synth_cfg = dataclasses.replace(cfg.synth, n_clips=total)
    data_dir = Path(cfg.data_dir)
    sidecar = data_dir / "config_hash.json"
    if sidecar.exists() and not force:
        prev = json.loads(sidecar.read_text())
        if prev.get("config_hash") == cfg.config_hash():
            return {s: split_manifest(cfg, s) for s in SPLITS}
        raise ConfigError(
            f"{data_dir} holds data for config {prev.get('config_hash')}, "
            f"current is {cfg.config_hash()}; pass --force to overwrite"
        )

    samples = synth_dyads(synth_cfg)
    bounds = {
        "train": (0, cfg.n_train),
        "val": (cfg.n_train, cfg.n_train + cfg.n_val),
        "test": (cfg.n_train + cfg.n_val, total),
    }
    manifests = {}
    for split, (lo, hi) in bounds.items():
        manifests[split] = save_corpus(
            samples[lo:hi], data_dir / split, split, cfg.synth.seed
        )
    _write_json(
        sidecar,
        {"config_hash": cfg.config_hash(), "synth": asdict(synth_cfg)},
    )
    return manifests


# ---------------------------------------------------------------------------
# Stage: train-vq
# ---------------------------------------------------------------------------


def vq_ckpt_dir(cfg: RunConfig, role: str) -> Path:
    return Path(cfg.ckpt_dir) / f"vq_{role}"


def run_train_vq(cfg: RunConfig, role: str) -> Path:
    """Train the codebook for one role on the train split."""
    if role not in ("speaker", "listener"):
        raise ConfigError("role must be 'speaker' or 'listener'")
    corpus = load_split(cfg, "train")
    motions = [getattr(s, role) for s in corpus]
    model, curve = train_vq(motions, cfg.vq, role=role)
    ckpt = vq_ckpt_dir(cfg, role)
    save_vq_checkpoint(
        model,
        ckpt,
        extra={"config_hash": cfg.config_hash(), "data_hash": data_hash(cfg, "train")},
    )
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["step,total"] + [f"{i},{v:.8g}" for i, v in enumerate(curve)]
    (out_dir / f"vq_{role}_losses.csv").write_text("\n".join(lines) + "\n")
    return ckpt


# ---------------------------------------------------------------------------
# Stage: pretrain
# ---------------------------------------------------------------------------


def dim_ckpt_dir(cfg: RunConfig) -> Path:
    return Path(cfg.ckpt_dir) / "dim"


def build_dim_model(cfg: RunConfig) -> DIMModel:
    """Fresh DIM model around the two trained codebooks; seeded init."""
    vq_s = load_vq_checkpoint(vq_ckpt_dir(cfg, "speaker"))
    vq_l = load_vq_checkpoint(vq_ckpt_dir(cfg, "listener"))
    torch.manual_seed(cfg.dim.seed)
    return DIMModel(cfg.dim, vq_s, vq_l)


def run_pretrain(cfg: RunConfig) -> Path:
    """Masked dyadic pretraining on the train split."""
    corpus = load_split(cfg, "train")
    model = build_dim_model(cfg)
    ckpt = dim_ckpt_dir(cfg)
    model, curves = pretrain(model, corpus, cfg.dim, ckpt_dir=ckpt)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_loss_csv(curves, out_dir / "pretrain_losses.csv")
    _write_json(
        ckpt / "sidecar.json",
        {"config_hash": cfg.config_hash(), "data_hash": data_hash(cfg, "train")},
    )
    return ckpt


# ---------------------------------------------------------------------------
# Stage: finetune
# ---------------------------------------------------------------------------


def gen_ckpt_dir(cfg: RunConfig, task: str) -> Path:
    return Path(cfg.ckpt_dir) / f"gen_{task}"


def run_finetune(cfg: RunConfig, task: str, ckpt_out: Path | None = None) -> Path:
    """Fine-tune the pretrained model for one generation task."""
    ft_cfg = dataclasses.replace(cfg.finetune, task=task)
    corpus = load_split(cfg, "train")
    pretrained = load_dim_checkpoint(dim_ckpt_dir(cfg))
    fn = finetune_listener if task == "listener" else finetune_speaker
    gen = fn(pretrained, corpus, ft_cfg)
    ckpt = Path(ckpt_out) if ckpt_out is not None else gen_ckpt_dir(cfg, task)
    save_dim_checkpoint(gen.model, ckpt)
    _write_json(
        ckpt / "generator.json",
        {
            "task": task,
            "finetune": asdict(ft_cfg),
            "config_hash": cfg.config_hash(),
            "data_hash": data_hash(cfg, "train"),
        },
    )
    return ckpt


def load_generator(ckpt: Path) -> GeneratorModel:
    sidecar = Path(ckpt) / "generator.json"
    if not sidecar.exists():
        raise MissingPrerequisiteError(f"no generator checkpoint at {ckpt}")
    meta = json.loads(sidecar.read_text())
    return GeneratorModel(model=load_dim_checkpoint(ckpt), task=meta["task"])


# ---------------------------------------------------------------------------
# Stage: generate
# ---------------------------------------------------------------------------

BASELINES = ("model", "random", "nearest", "mirror")


def generated_dir(cfg: RunConfig, task: str, split: str, source: str = "model") -> Path:
    return Path(cfg.out_dir) / f"generated_{task}_{split}_{source}"


def run_generate(
    cfg: RunConfig,
    task: str = "listener",
    split: str = "test",
    source: str = "model",
    ckpt: Path | None = None,
) -> Path:
    """Generate motion for every clip of a split; write one DIMT per clip."""
    if source not in BASELINES:
        raise ConfigError(f"unknown generation source '{source}'")
    if source != "model" and task != "listener":
        raise ConfigError("baselines are defined for the listener task only")
    corpus = load_split(cfg, split)
    out = generated_dir(cfg, task, split, source)
    out.mkdir(parents=True, exist_ok=True)

    if source == "model":
        gen = load_generator(Path(ckpt) if ckpt is not None else gen_ckpt_dir(cfg, task))
        if gen.task != task:
            raise ConfigError(f"checkpoint task '{gen.task}' does not match '{task}'")
        if task == "listener":
            produce = lambda s: generate_listener(gen, s.speaker, s.audio)
        else:
            produce = lambda s: generate_speaker(gen, s.audio)
    elif source == "random":
        baseline = baseline_random(load_split(cfg, "train"), seed=cfg.seed)
        produce = lambda s: baseline.generate(s.speaker, s.audio)
    elif source == "nearest":
        baseline = baseline_nearest_motion(load_split(cfg, "train"))
        produce = lambda s: baseline.generate(s.speaker, s.audio)
    else:
        baseline = baseline_mirror()
        produce = lambda s: baseline.generate(s.speaker, s.audio)

    for sample in corpus:
        save_tensor_file(produce(sample).frames, out / f"{sample.clip_id}.dimt")
    _write_json(
        out / "generation_meta.json",
        {
            "task": task,
            "split": split,
            "source": source,
            "clip_ids": [s.clip_id for s in corpus],
            "config_hash": cfg.config_hash(),
            "data_hash": data_hash(cfg, split),
        },
    )
    return out


# ---------------------------------------------------------------------------
# Stage: evaluate
# ---------------------------------------------------------------------------


def run_evaluate(cfg: RunConfig, gen_dir: Path, force: bool = False) -> Path:
    """Score a generated directory against its ground-truth split."""
    gen_dir = Path(gen_dir)
    meta_path = gen_dir / "generation_meta.json"
    if not meta_path.exists():
        raise MissingPrerequisiteError(f"no generation_meta.json in {gen_dir}")
    meta = json.loads(meta_path.read_text())
    split, task = meta["split"], meta["task"]
    current = data_hash(cfg, split)
    if meta["data_hash"] != current and not force:
        raise ConfigError(
            f"data hash mismatch for split '{split}': generated against "
            f"{meta['data_hash']}, current data is {current}; pass --force to evaluate anyway"
        )

    corpus = {s.clip_id: s for s in load_split(cfg, split)}
    generated = {
        cid: MotionSequence(load_tensor_file(gen_dir / f"{cid}.dimt"))
        for cid in meta["clip_ids"]
    }
    gt_role = "listener" if task == "listener" else "speaker"
    gt = {cid: getattr(corpus[cid], gt_role) for cid in generated}
    speakers = {cid: corpus[cid].speaker for cid in generated}
    report = evaluate(generated, gt, speakers, cfg.metrics)
    report.extra = {"task": task, "split": split, "source": meta["source"]}

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"report_{task}_{split}_{meta['source']}.json"
    path.write_text(report.to_json() + "\n")
    return path


# ---------------------------------------------------------------------------
# Stage: report
# ---------------------------------------------------------------------------


def run_report(cfg: RunConfig, report_paths: list, plots: bool = True) -> Path:
    """Aggregate metric reports into one CSV, optionally with bar plots."""
    if not report_paths:
        raise ConfigError("no report files given")
    reports = []
    for p in report_paths:
        p = Path(p)
        if not p.exists():
            raise MissingPrerequisiteError(f"missing report {p}")
        reports.append((p.stem, MetricReport.from_json(p.read_text())))

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["name," + MetricReport.CSV_FIELDS]
    for name, rep in reports:
        lines.append(f"{name},{rep.to_csv_row()}")
    summary = out_dir / "report_summary.csv"
    summary.write_text("\n".join(lines) + "\n")

    if plots:
        try:
            import matplotlib

            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            return summary
        fields = MetricReport.CSV_FIELDS.split(",")
        fig, axes = plt.subplots(2, 7, figsize=(22, 6))
        names = [name for name, _ in reports]
        for ax, fieldname in zip(axes.ravel(), fields):
            ax.bar(range(len(reports)), [getattr(r, fieldname) for _, r in reports])
            ax.set_title(fieldname)
            ax.set_xticks(range(len(reports)))
            ax.set_xticklabels(names, rotation=90, fontsize=6)
        fig.tight_layout()
        fig.savefig(out_dir / "report_summary.png", dpi=100)
        plt.close(fig)
    return summary


# ---------------------------------------------------------------------------
# Stage: ablate
# ---------------------------------------------------------------------------

ABLATION_ARMS = {
    # arm -> (init, unfreeze_vq_decoder, contrastive)
    "full": ("pretrained", True, True),
    "no_pretrain": ("scratch", True, True),
    "frozen_vq_decoder": ("pretrained", False, True),
    "no_contrastive": ("pretrained", True, False),
}


def _ablate_one(
    cfg: RunConfig, arm: str, repeat: int, pretrained_cache: dict
) -> MetricReport:
    """Finetune + generate + evaluate one ablation arm on the val split."""
    init, unfreeze, contrastive = ABLATION_ARMS[arm]
    seed = cfg.seed + repeat

    key = (contrastive, repeat)
    if key not in pretrained_cache:
        dim_cfg = dataclasses.replace(
            cfg.dim, seed=seed, lambda1=cfg.dim.lambda1 if contrastive else 0.0
        )
        corpus = load_split(cfg, "train")
        vq_s = load_vq_checkpoint(vq_ckpt_dir(cfg, "speaker"))
        vq_l = load_vq_checkpoint(vq_ckpt_dir(cfg, "listener"))
        torch.manual_seed(dim_cfg.seed)
        model = DIMModel(dim_cfg, vq_s, vq_l)
        model, _ = pretrain(model, corpus, dim_cfg)
        pretrained_cache[key] = model
    pretrained = pretrained_cache[key]

    ft_cfg = dataclasses.replace(
        cfg.finetune,
        task="listener",
        init=init,
        unfreeze_vq_decoder=unfreeze,
        seed=seed,
    )
    corpus = load_split(cfg, "train")
    gen = finetune_listener(pretrained, corpus, ft_cfg)

    val = load_split(cfg, "val")
    generated = {s.clip_id: generate_listener(gen, s.speaker, s.audio) for s in val}
    gt = {s.clip_id: s.listener for s in val}
    speakers = {s.clip_id: s.speaker for s in val}
    report = evaluate(generated, gt, speakers, cfg.metrics)
    report.extra = {"arm": arm, "repeat": repeat}
    return report


def run_ablate(cfg: RunConfig) -> Path:
    """Run the ablation grid and write a per-arm CSV on the val split."""
    pretrained_cache: dict = {}
    rows = []
    for repeat in range(cfg.ablate_repeats):
        for arm, (init, unfreeze, contrastive) in ABLATION_ARMS.items():
            rep = _ablate_one(cfg, arm, repeat, pretrained_cache)
            rows.append(
                f"{arm},{init},{unfreeze},{contrastive},{repeat},{rep.to_csv_row()}"
            )
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "ablation.csv"
    header = "arm,init,unfreeze_vq_decoder,contrastive,repeat," + MetricReport.CSV_FIELDS
    path.write_text("\n".join([header] + rows) + "\n")
    return path


def ablation_majorities(csv_path: Path) -> dict[str, bool]:
    """Majority-vote directional checks from an ablation CSV.

    Directions (per repeat, then majority over repeats):
      pretrained_helps_mse:  full mse <= no_pretrain mse (expression+pose sum)
      unfrozen_helps_fd:     full fd  <= frozen_vq_decoder fd
      contrastive_helps_fd:  full fd  <= no_contrastive fd
    """
    lines = Path(csv_path).read_text().strip().splitlines()
    header = lines[0].split(",")
    rows = [dict(zip(header, ln.split(","))) for ln in lines[1:]]
    by = {}
    for r in rows:
        by[(r["arm"], int(r["repeat"]))] = r

    def metric(arm, repeat, names):
        return sum(float(by[(arm, repeat)][n]) for n in names)

    repeats = sorted({int(r["repeat"]) for r in rows})
    votes = {"pretrained_helps_mse": 0, "unfrozen_helps_fd": 0, "contrastive_helps_fd": 0}
    for rep in repeats:
        if metric("full", rep, ["mse_exp", "mse_pose"]) <= metric(
            "no_pretrain", rep, ["mse_exp", "mse_pose"]
        ):
            votes["pretrained_helps_mse"] += 1
        if metric("full", rep, ["fd_exp", "fd_pose"]) <= metric(
            "frozen_vq_decoder", rep, ["fd_exp", "fd_pose"]
        ):
            votes["unfrozen_helps_fd"] += 1
        if metric("full", rep, ["fd_exp", "fd_pose"]) <= metric(
            "no_contrastive", rep, ["fd_exp", "fd_pose"]
        ):
            votes["contrastive_helps_fd"] += 1
    return {k: v > len(repeats) / 2 for k, v in votes.items()}
