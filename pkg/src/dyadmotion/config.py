"""Run configuration: one JSON document driving the whole pipeline.

Flag overrides beat file values, which beat defaults. The global seed
propagates into every sub-config that does not set its own.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, asdict, fields
from pathlib import Path

from .data import SynthConfig
from .errors import ConfigError
from .finetune import FinetuneConfig
from .metrics import MetricConfig
from .pretrain import DIMConfig
from .vq import VQConfig

_SECTION_TYPES = {
    "synth": SynthConfig,
    "vq": VQConfig,
    "dim": DIMConfig,
    "finetune": FinetuneConfig,
    "metrics": MetricConfig,
}


@dataclass
class RunConfig:
    seed: int = 0
    data_dir: str = "data"
    ckpt_dir: str = "ckpt"
    out_dir: str = "out"
    n_train: int = 14
    n_val: int = 3
    n_test: int = 3
    ablate_repeats: int = 3
    synth: SynthConfig = field(default_factory=SynthConfig)
    vq: VQConfig = field(default_factory=VQConfig)
    dim: DIMConfig = field(default_factory=DIMConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)

    def resolve(self, root: Path) -> "RunConfig":
        """Anchor relative directories under ``root`` (DIM_HOME or cwd)."""
        out = RunConfig(**{**asdict_shallow(self)})
        for name in ("data_dir", "ckpt_dir", "out_dir"):
            p = Path(getattr(self, name))
            if not p.is_absolute():
                setattr(out, name, str(root / p))
        return out

    def config_hash(self) -> str:
        """Hash of the semantic configuration; directory locations excluded."""
        doc = asdict(self)
        for key in ("data_dir", "ckpt_dir", "out_dir"):
            doc.pop(key)
        return hashlib.sha256(
            json.dumps(doc, sort_keys=True, default=list).encode()
        ).hexdigest()[:16]


def asdict_shallow(cfg: RunConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def _build_section(name: str, cls, doc: dict, global_seed: int):
    known = {f.name for f in fields(cls)}
    for key in doc:
        if key not in known:
            raise ConfigError(f"config section '{name}': unknown key '{key}'")
    kwargs = dict(doc)
    if "seed" in known and "seed" not in kwargs:
        kwargs["seed"] = global_seed
    # JSON stores tuples as lists
    for f in fields(cls):
        if f.name in kwargs and isinstance(kwargs[f.name], list):
            kwargs[f.name] = tuple(kwargs[f.name])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config section '{name}': {exc}") from exc


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Load a RunConfig from JSON, applying CLI overrides on top."""
    doc = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}"
            ) from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top-level config must be a JSON object")

    overrides = overrides or {}
    top_fields = {f.name for f in fields(RunConfig)}
    for key in doc:
        if key not in top_fields:
            raise ConfigError(f"unknown top-level config key '{key}'")

    merged = dict(doc)
    for key, val in overrides.items():
        if val is not None:
            merged[key] = val

    seed = int(merged.get("seed", 0))
    kwargs = {"seed": seed}
    for key in ("data_dir", "ckpt_dir", "out_dir"):
        if key in merged:
            kwargs[key] = str(merged[key])
    for key in ("n_train", "n_val", "n_test", "ablate_repeats"):
        if key in merged:
            try:
                kwargs[key] = int(merged[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"config key '{key}' must be an integer") from exc
    for name, cls in _SECTION_TYPES.items():
        section = merged.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"config section '{name}' must be an object")
        kwargs[name] = _build_section(name, cls, section, seed)
    return RunConfig(**kwargs)


def artifact_root() -> Path:
    return Path(os.environ.get("DIM_HOME", "."))
