"""Discrete motion codebooks for speaker and listener motions.

A per-window MLP encoder maps ``stride`` consecutive frames to one latent
vector, which is quantized to the nearest codebook entry (squared Euclidean,
lowest index on ties). The decoder upsamples each code back to ``stride``
frames. Training uses the straight-through estimator for the quantization
step and the usual reconstruction + codebook/commitment objective.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import MOTION_DIM, MotionSequence, save_tensor_file, load_tensor_file
from .errors import DivergenceError, MissingPrerequisiteError


@dataclass
class VQConfig:
    codebook_size: int = 256
    code_dim: int = 128
    stride: int = 2
    beta: float = 0.25
    # the codebook term is a per-latent squared L2 (sum over code_dim), so its
    # weight is kept small to balance against the per-element-mean recon loss
    gamma: float = 0.01
    hidden_dim: int = 256
    n_layers: int = 2
    learning_rate: float = 1e-4
    steps: int = 3000
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if min(self.codebook_size, self.code_dim, self.stride, self.hidden_dim, self.n_layers) < 1:
            raise ValueError("architecture sizes must be positive")
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be >= 0")


@dataclass
class TokenSequence:
    """Discrete latent codes: indices into a codebook."""

    tokens: np.ndarray
    codebook_size: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1:
            raise ValueError("tokens must be a 1-D index vector")
        if len(self.tokens) and (self.tokens.min() < 0 or self.tokens.max() >= self.codebook_size):
            raise ValueError("token out of codebook range")

    def __len__(self):
        return len(self.tokens)


def _mlp(in_dim: int, hidden: int, out_dim: int, n_layers: int) -> nn.Sequential:
    layers, d = [], in_dim
    for _ in range(n_layers - 1):
        layers += [nn.Linear(d, hidden), nn.GELU()]
        d = hidden
    layers.append(nn.Linear(d, out_dim))
    return nn.Sequential(*layers)


class VQModel(nn.Module):
    """Role-specific VQ autoencoder over motion windows."""

    def __init__(self, role: str, config: VQConfig):
        super().__init__()
        if role not in ("speaker", "listener"):
            raise ValueError("role must be 'speaker' or 'listener'")
        self.role = role
        self.config = config
        w = config.stride
        self.encoder = _mlp(w * MOTION_DIM, config.hidden_dim, config.code_dim, config.n_layers)
        self.decoder = _mlp(config.code_dim, config.hidden_dim, w * MOTION_DIM, config.n_layers)
        self.codebook = nn.Embedding(config.codebook_size, config.code_dim)
        nn.init.normal_(self.codebook.weight, std=0.1)
        self.usage_counts = np.zeros(config.codebook_size, dtype=np.int64)

    # -- windowing ---------------------------------------------------------

    def frames_to_windows(self, frames: torch.Tensor) -> torch.Tensor:
        """Right-pad by repeating the last frame to a stride multiple, then group."""
        T = frames.shape[0]
        w = self.config.stride
        pad = (-T) % w
        if pad:
            frames = torch.cat([frames, frames[-1:].expand(pad, -1)], dim=0)
        return frames.reshape(-1, w * MOTION_DIM)

    def windows_to_frames(self, windows: torch.Tensor, n_frames: int | None = None) -> torch.Tensor:
        frames = windows.reshape(-1, MOTION_DIM)
        return frames if n_frames is None else frames[:n_frames]

    # -- quantization ------------------------------------------------------

    def quantize(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Nearest codebook entry per latent row; ties break to the lowest index."""
        d2 = ((z[:, None, :] - self.codebook.weight[None]) ** 2).sum(dim=2)
        idx = d2.argmin(dim=1)
        return idx, self.codebook.weight[idx]

    def loss_terms(self, frames: torch.Tensor) -> dict[str, torch.Tensor]:
        """Reconstruction, codebook and total losses with straight-through grads."""
        windows = self.frames_to_windows(frames)
        z = self.encoder(windows)
        idx, q = self.quantize(z)
        q_st = z + (q - z).detach()
        recon_windows = self.decoder(q_st)
        recon = ((recon_windows - windows) ** 2).mean()
        # codebook/commitment terms: squared L2 per latent, averaged over latents
        codebook = ((z.detach() - q) ** 2).sum(dim=1).mean() + self.config.beta * (
            (q.detach() - z) ** 2
        ).sum(dim=1).mean()
        total = recon + self.config.gamma * codebook
        return {"recon": recon, "codebook": codebook, "total": total, "indices": idx}

    def reset_usage(self):
        self.usage_counts[:] = 0


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def _as_frames_tensor(motion, dtype=None) -> torch.Tensor:
    frames = motion.frames if isinstance(motion, MotionSequence) else np.asarray(motion)
    return torch.as_tensor(frames, dtype=dtype or torch.float32)


def _model_dtype(model: VQModel):
    return model.codebook.weight.dtype


def vq_encode(model: VQModel, motion) -> tuple[np.ndarray, TokenSequence]:
    """Encode motion to continuous latents and nearest-codebook tokens.

    Updates the model's usage counters as a side effect.
    """
    model.eval()
    with torch.no_grad():
        windows = model.frames_to_windows(_as_frames_tensor(motion, _model_dtype(model)))
        z = model.encoder(windows)
        if not torch.isfinite(z).all():
            raise DivergenceError("non-finite latent; encoder diverged")
        idx, _ = model.quantize(z)
    tokens = idx.numpy().astype(np.int64)
    model.usage_counts += np.bincount(tokens, minlength=model.config.codebook_size)
    return z.numpy(), TokenSequence(tokens=tokens, codebook_size=model.config.codebook_size)


def vq_decode(model: VQModel, tokens: TokenSequence, n_frames: int | None = None) -> MotionSequence:
    """Decode tokens to motion; output has stride*len(tokens) frames unless truncated."""
    if tokens.codebook_size != model.config.codebook_size:
        raise ValueError("token codebook size does not match model")
    model.eval()
    with torch.no_grad():
        q = model.codebook.weight[torch.as_tensor(tokens.tokens)]
        frames = model.windows_to_frames(model.decoder(q), n_frames)
    return MotionSequence(frames.numpy())


def vq_losses(model: VQModel, motion) -> dict[str, float]:
    model.eval()
    with torch.no_grad():
        terms = model.loss_terms(_as_frames_tensor(motion, _model_dtype(model)))
    return {k: float(terms[k]) for k in ("recon", "codebook", "total")}


def codebook_utilization(model: VQModel) -> float:
    """Fraction of codebook entries with nonzero usage count."""
    return float((model.usage_counts > 0).sum() / len(model.usage_counts))


def init_codebook_from_data(model: VQModel, motions: list, seed: int) -> None:
    """Seed codebook entries with encoder outputs sampled from the corpus.

    Spreads initial entries over the latent distribution so that training
    starts with healthy utilization.
    """
    with torch.no_grad():
        latents = torch.cat(
            [
                model.encoder(model.frames_to_windows(_as_frames_tensor(m, _model_dtype(model))))
                for m in motions
            ]
        )
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(latents), size=model.config.codebook_size, replace=len(latents) < model.config.codebook_size)
    with torch.no_grad():
        model.codebook.weight.copy_(latents[torch.as_tensor(pick)])


def train_vq(motions: list, config: VQConfig, role: str = "listener") -> tuple[VQModel, list[float]]:
    """Train a VQ model on a list of MotionSequence; deterministic per seed.

    Returns the trained model and the per-step total-loss curve.
    """
    if not motions:
        raise ValueError("empty dataset")
    torch.manual_seed(config.seed)
    model = VQModel(role, config)
    init_codebook_from_data(model, motions, config.seed)

    all_windows = torch.cat([model.frames_to_windows(_as_frames_tensor(m)) for m in motions])
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    curve = []
    model.train()
    for step in range(config.steps):
        batch_idx = rng.integers(len(all_windows), size=min(config.batch_size, len(all_windows)))
        batch = all_windows[torch.as_tensor(batch_idx)].reshape(-1, MOTION_DIM)
        terms = model.loss_terms(batch)
        loss = terms["total"]
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite VQ loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(loss.item())
    model.eval()
    return model, curve


def quantization_snapshot(model: VQModel, frames: torch.Tensor) -> dict:
    """Freeze the stop-gradient quantities of :meth:`VQModel.loss_terms`.

    Gradient checks evaluate the loss with these held constant, so the
    function becomes smooth and its finite-difference gradient equals the
    autodiff gradient of the straight-through graph at the base point.
    """
    with torch.no_grad():
        windows = model.frames_to_windows(frames)
        z = model.encoder(windows)
        idx, q = model.quantize(z)
    return {"indices": idx, "z": z.clone(), "offset": (q - z).clone()}


def loss_total_frozen(model: VQModel, frames: torch.Tensor, snap: dict) -> torch.Tensor:
    """Total VQ loss with quantization assignments and sg[] values frozen."""
    windows = model.frames_to_windows(frames)
    z = model.encoder(windows)
    recon = ((model.decoder(z + snap["offset"]) - windows) ** 2).mean()
    q = model.codebook.weight[snap["indices"]]
    codebook = ((snap["z"] - q) ** 2).sum(dim=1).mean() + model.config.beta * (
        ((snap["z"] + snap["offset"]) - z) ** 2
    ).sum(dim=1).mean()
    return recon + model.config.gamma * codebook


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_vq_checkpoint(model: VQModel, ckpt_dir, extra: dict | None = None) -> None:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    params = []
    for name, tensor in model.state_dict().items():
        fname = name.replace(".", "__") + ".dimt"
        save_tensor_file(tensor.numpy().astype(np.float32), ckpt_dir / fname)
        params.append(name)
    save_tensor_file(model.usage_counts.astype(np.int32), ckpt_dir / "usage_counts.dimt")
    manifest = {
        "kind": "vq",
        "role": model.role,
        "config": asdict(model.config),
        "params": params,
    }
    if extra:
        manifest.update(extra)
    (ckpt_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_vq_checkpoint(ckpt_dir) -> VQModel:
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / "manifest.json"
    if not manifest_path.exists():
        raise MissingPrerequisiteError(f"no VQ checkpoint at {ckpt_dir}")
    manifest = json.loads(manifest_path.read_text())
    model = VQModel(manifest["role"], VQConfig(**manifest["config"]))
    state = {
        name: torch.as_tensor(load_tensor_file(ckpt_dir / (name.replace(".", "__") + ".dimt")))
        for name in manifest["params"]
    }
    model.load_state_dict(state)
    model.usage_counts = load_tensor_file(ckpt_dir / "usage_counts.dimt").astype(np.int64)
    model.eval()
    return model
