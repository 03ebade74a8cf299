"""Masked dual-branch pretraining over speaker/listener motion streams.

Both streams are tokenized by frozen VQ encoders, masked at a configurable
rate, encoded by role-specific transformers, fused by a joint encoder, and
decoded (together with the speaker's audio features) into per-token codebook
logits for each role. Training combines a speaker-anchored contrastive loss
over mean-pooled role features with a masked cross-entropy + continuous
reconstruction objective.

By default the decoder wiring is cross-role: speaker logits are predicted
from the listener-side features and vice versa. ``decode_role_alignment``
switches to the straight wiring for ablations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .data import MOTION_DIM, DyadicSample, MaskMap, MotionSequence, align_audio, uniform_mask
from .data import save_tensor_file, load_tensor_file
from .errors import DivergenceError, MissingPrerequisiteError
from .vq import VQModel, VQConfig, TokenSequence, vq_encode

_ROLE_CODE = {"speaker": 0, "listener": 1}


@dataclass
class DIMConfig:
    mask_p: float = 50.0
    tau: float = 0.07
    lambda1: float = 0.1
    lambda2: float = 1.0
    model_dim: int = 256
    layers: int = 8
    heads: int = 8
    intermediate: int = 768
    learning_rate: float = 1e-5
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    audio_dim: int = 64
    decode_role_alignment: str = "cross"  # or "straight"
    symmetric_contrastive: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be >= 0")
        if self.model_dim % self.heads:
            raise ValueError("heads must divide model_dim")
        if self.decode_role_alignment not in ("cross", "straight"):
            raise ValueError("decode_role_alignment must be 'cross' or 'straight'")


def sinusoidal_table(T: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Standard fixed sine/cosine positional table, T x dim."""
    pos = torch.arange(T, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(T, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div[: table[:, 1::2].shape[1]])
    return table.to(dtype)


def derive_mask_seed(seed: int, sample_index: int, role: str) -> int:
    """Stable per-(seed, sample, role) seed for the shared uniform mask sampler."""
    ss = np.random.SeedSequence([int(seed), int(sample_index), _ROLE_CODE[role]])
    return int(ss.generate_state(1)[0])


class RoleEmbeddings(nn.Module):
    """Learnable role/mask vectors; positional embeddings stay sinusoidal."""

    def __init__(self, dim: int):
        super().__init__()
        self.enc_speaker = nn.Parameter(torch.zeros(dim))
        self.enc_listener = nn.Parameter(torch.zeros(dim))
        self.dec_speaker = nn.Parameter(torch.zeros(dim))
        self.dec_listener = nn.Parameter(torch.zeros(dim))
        self.mask_speaker = nn.Parameter(torch.randn(dim) * 0.02)
        self.mask_listener = nn.Parameter(torch.randn(dim) * 0.02)

    def enc(self, role):
        return self.enc_speaker if role == "speaker" else self.enc_listener

    def dec(self, role):
        return self.dec_speaker if role == "speaker" else self.dec_listener

    def mask(self, role):
        return self.mask_speaker if role == "speaker" else self.mask_listener


def _encoder(d_model, heads, ff, layers):
    layer = nn.TransformerEncoderLayer(
        d_model=d_model,
        nhead=heads,
        dim_feedforward=ff,
        dropout=0.0,
        activation="gelu",
        batch_first=True,
        norm_first=True,
    )
    return nn.TransformerEncoder(layer, num_layers=layers, enable_nested_tensor=False)


class DIMModel(nn.Module):
    """Role encoders, joint encoder/decoder and frozen VQ references."""

    def __init__(self, config: DIMConfig, vq_speaker: VQModel, vq_listener: VQModel):
        super().__init__()
        if vq_speaker.config.codebook_size != vq_listener.config.codebook_size:
            raise ValueError("speaker and listener codebooks must agree in size")
        d = config.model_dim
        self.config = config
        self.proj_speaker = nn.Linear(MOTION_DIM, d)
        self.proj_listener = nn.Linear(MOTION_DIM, d)
        self.audio_proj = nn.Linear(config.audio_dim, d)
        self.enc_speaker = _encoder(d, config.heads, config.intermediate, config.layers)
        self.enc_listener = _encoder(d, config.heads, config.intermediate, config.layers)
        self.enc_joint = _encoder(2 * d, config.heads, 2 * config.intermediate, config.layers)
        self.dec_joint = _encoder(d, config.heads, config.intermediate, config.layers)
        self.head_speaker = nn.Linear(d, vq_speaker.config.codebook_size)
        self.head_listener = nn.Linear(d, vq_listener.config.codebook_size)
        self.embeddings = RoleEmbeddings(d)
        self.vq_speaker = vq_speaker
        self.vq_listener = vq_listener
        for p in self.vq_speaker.parameters():
            p.requires_grad_(False)
        for p in self.vq_listener.parameters():
            p.requires_grad_(False)

    def vq(self, role) -> VQModel:
        return self.vq_speaker if role == "speaker" else self.vq_listener

    def proj(self, role) -> nn.Linear:
        return self.proj_speaker if role == "speaker" else self.proj_listener

    def enc(self, role):
        return self.enc_speaker if role == "speaker" else self.enc_listener

    def head(self, role):
        return self.head_speaker if role == "speaker" else self.head_listener

    @property
    def dtype(self):
        return self.proj_speaker.weight.dtype


def prepare_targets(model: DIMModel, sample: DyadicSample) -> tuple[TokenSequence, TokenSequence]:
    """Discrete token targets from the frozen VQ encoders."""
    if sample.speaker.T != sample.listener.T:
        raise ValueError("speaker/listener length mismatch")
    _, z_s = vq_encode(model.vq_speaker, sample.speaker)
    _, z_l = vq_encode(model.vq_listener, sample.listener)
    return z_s, z_l


def contrastive_loss(pooled_s, pooled_l, tau: float) -> torch.Tensor:
    """Speaker-anchored InfoNCE over mean-pooled role features.

    L = -(1/N) sum_i log softmax_k(x_s_i . x_l_k / tau)[i], computed via
    logsumexp for numerical stability.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    xs = torch.as_tensor(pooled_s, dtype=torch.float64) if not torch.is_tensor(pooled_s) else pooled_s
    xl = torch.as_tensor(pooled_l, dtype=torch.float64) if not torch.is_tensor(pooled_l) else pooled_l
    logits = xs @ xl.T / tau
    pos = logits.diagonal()
    return (torch.logsumexp(logits, dim=1) - pos).mean()


@dataclass
class DIMForward:
    logits_s: torch.Tensor  # B x n_tok x |C|
    logits_l: torch.Tensor
    soft_recon_s: torch.Tensor  # B x T x 56, differentiable
    soft_recon_l: torch.Tensor
    hard_recon_s: np.ndarray  # argmax-decoded, for evaluation
    hard_recon_l: np.ndarray
    pooled_s: torch.Tensor  # B x model_dim
    pooled_l: torch.Tensor
    masks_s: list  # MaskMap per sample
    masks_l: list
    token_mask_s: torch.Tensor  # B x n_tok bool
    token_mask_l: torch.Tensor


def _token_mask(frame_mask: np.ndarray, stride: int, n_tok: int) -> np.ndarray:
    """A token is a target iff any frame of its stride window is masked."""
    T = len(frame_mask)
    out = np.zeros(n_tok, dtype=bool)
    for j in range(n_tok):
        out[j] = frame_mask[j * stride : min((j + 1) * stride, T)].any()
    return out


def _soft_decode(vq: VQModel, probs: torch.Tensor, T: int) -> torch.Tensor:
    """Probability-weighted codebook mixture through the VQ decoder (per batch)."""
    emb = probs @ vq.codebook.weight  # B x n_tok x code_dim
    windows = vq.decoder(emb)
    B = probs.shape[0]
    return windows.reshape(B, -1, MOTION_DIM)[:, :T]


def dim_forward(
    model: DIMModel,
    samples: list[DyadicSample],
    seed: int,
    p_s: float | None = None,
    p_l: float | None = None,
) -> DIMForward:
    """Run the masked dual-branch pipeline on a batch of aligned dyads.

    ``p_s``/``p_l`` override the configured mask rate (fine-tuning uses
    p_s=0, p_l=100). Masked positions keep their slot but carry the role's
    trainable mask token instead of frame content.
    """
    cfg = model.config
    p_s = cfg.mask_p if p_s is None else p_s
    p_l = cfg.mask_p if p_l is None else p_l
    T = samples[0].speaker.T
    if any(s.speaker.T != T for s in samples):
        raise ValueError("all samples in a batch must share T")
    B = len(samples)
    dt = model.dtype
    dev_pos = sinusoidal_table(T, cfg.model_dim, dtype=dt)

    streams, masks, pooled = {}, {}, {}
    for role, p in (("speaker", p_s), ("listener", p_l)):
        frames = torch.stack(
            [
                torch.as_tensor(
                    (s.speaker if role == "speaker" else s.listener).frames, dtype=dt
                )
                for s in samples
            ]
        )
        role_masks = [uniform_mask(T, p, derive_mask_seed(seed, i, role)) for i in range(B)]
        bool_masks = torch.as_tensor(np.stack([m.bool_mask() for m in role_masks]))
        x = model.proj(role)(frames)
        x = torch.where(bool_masks[:, :, None], model.embeddings.mask(role).expand(B, T, -1), x)
        x = x + model.embeddings.enc(role) + dev_pos
        enc_out = model.enc(role)(x)
        keep = ~bool_masks
        denom = keep.sum(dim=1, keepdim=True).clamp(min=1).to(dt)
        pool = torch.where(
            keep.any(dim=1, keepdim=True),
            (enc_out * keep[:, :, None].to(dt)).sum(dim=1) / denom,
            enc_out.mean(dim=1),
        )
        streams[role] = enc_out
        masks[role] = (role_masks, bool_masks)
        pooled[role] = pool

    joint = model.enc_joint(torch.cat([streams["speaker"], streams["listener"]], dim=2))
    j = {"speaker": joint[..., : cfg.model_dim], "listener": joint[..., cfg.model_dim :]}

    audio = torch.stack(
        [torch.as_tensor(align_audio(s.audio, T).features, dtype=dt) for s in samples]
    )
    audio_part = model.audio_proj(audio) + dev_pos

    def decode_stream(source_role: str):
        _, bool_mask = masks[source_role]
        d_in = torch.where(
            bool_mask[:, :, None],
            model.embeddings.mask(source_role).expand(B, T, -1),
            j[source_role],
        )
        d_in = d_in + model.embeddings.dec(source_role) + dev_pos
        return model.dec_joint(torch.cat([d_in, audio_part], dim=1))[:, :T]

    # Eq-style cross wiring: each role's logits come from the other role's stream.
    source_for = (
        {"speaker": "listener", "listener": "speaker"}
        if cfg.decode_role_alignment == "cross"
        else {"speaker": "speaker", "listener": "listener"}
    )
    logits, soft, hard, token_masks = {}, {}, {}, {}
    for role in ("speaker", "listener"):
        decoded = decode_stream(source_for[role])
        w = model.vq(role).config.stride
        n_tok = (T + w - 1) // w
        pad = (-T) % w
        if pad:
            decoded = torch.cat([decoded, decoded[:, -1:].expand(B, pad, -1)], dim=1)
        per_token = decoded.reshape(B, n_tok, w, -1).mean(dim=2)
        logits[role] = model.head(role)(per_token)
        if not torch.isfinite(logits[role]).all():
            raise DivergenceError("non-finite activations in dim_forward")
        soft[role] = _soft_decode(model.vq(role), torch.softmax(logits[role], dim=2), T)
        with torch.no_grad():
            idx = logits[role].argmax(dim=2)
            emb = model.vq(role).codebook.weight[idx]
            hard[role] = (
                model.vq(role).decoder(emb).reshape(B, -1, MOTION_DIM)[:, :T].numpy()
            )
        role_masks, _ = masks[role]
        token_masks[role] = torch.as_tensor(
            np.stack([_token_mask(m.bool_mask(), w, n_tok) for m in role_masks])
        )

    return DIMForward(
        logits_s=logits["speaker"],
        logits_l=logits["listener"],
        soft_recon_s=soft["speaker"],
        soft_recon_l=soft["listener"],
        hard_recon_s=hard["speaker"],
        hard_recon_l=hard["listener"],
        pooled_s=pooled["speaker"],
        pooled_l=pooled["listener"],
        masks_s=masks["speaker"][0],
        masks_l=masks["listener"][0],
        token_mask_s=token_masks["speaker"],
        token_mask_l=token_masks["listener"],
    )


def dim_losses(
    out: DIMForward,
    targets_s: torch.Tensor,
    targets_l: torch.Tensor,
    speaker_frames: torch.Tensor,
    listener_frames: torch.Tensor,
    lambda1: float,
    lambda2: float,
    tau: float,
    roles: tuple = ("speaker", "listener"),
    symmetric_contrastive: bool = False,
) -> dict[str, torch.Tensor]:
    """Masked reconstruction + contrastive objective (Eq.-10-style total).

    Per role: natural-log cross-entropy over masked tokens plus mean squared
    error over masked frames, each averaged over the masked positions.
    """
    per_role = {}
    spec = {
        "speaker": (out.logits_s, targets_s, out.token_mask_s, out.soft_recon_s, speaker_frames, out.masks_s),
        "listener": (out.logits_l, targets_l, out.token_mask_l, out.soft_recon_l, listener_frames, out.masks_l),
    }
    zero = out.logits_s.sum() * 0
    for role in ("speaker", "listener"):
        if role not in roles:
            per_role[role] = zero
            continue
        logits, targets, token_mask, recon, frames, mask_maps = spec[role]
        if not token_mask.any():
            if any(m.p > 0 for m in mask_maps):
                raise ValueError(f"empty mask for {role} with p > 0")
            per_role[role] = zero
            continue
        ce = F.cross_entropy(logits[token_mask], targets[token_mask])
        frame_mask = torch.as_tensor(np.stack([m.bool_mask() for m in mask_maps]))
        cont = ((recon - frames) ** 2)[frame_mask].mean()
        per_role[role] = ce + cont

    l_c = contrastive_loss(out.pooled_s, out.pooled_l, tau)
    if symmetric_contrastive:
        l_c = (l_c + contrastive_loss(out.pooled_l, out.pooled_s, tau)) / 2
    total = lambda1 * l_c + lambda2 * (per_role["speaker"] + per_role["listener"])
    return {
        "L_c": l_c,
        "L_rec_s": per_role["speaker"],
        "L_rec_l": per_role["listener"],
        "total": total,
    }


def batch_targets(model: DIMModel, samples: list[DyadicSample]) -> tuple[torch.Tensor, torch.Tensor]:
    zs, zl = [], []
    for s in samples:
        ts, tl = prepare_targets(model, s)
        zs.append(ts.tokens)
        zl.append(tl.tokens)
    return torch.as_tensor(np.stack(zs)), torch.as_tensor(np.stack(zl))


def _vq_encoder_fingerprint(model: DIMModel) -> bytes:
    parts = []
    for vq in (model.vq_speaker, model.vq_listener):
        for t in vq.encoder.state_dict().values():
            parts.append(t.numpy().tobytes())
        parts.append(vq.codebook.weight.detach().numpy().tobytes())
    return b"".join(parts)


def pretrain(
    model: DIMModel,
    corpus: list[DyadicSample],
    config: DIMConfig | None = None,
    ckpt_dir=None,
) -> tuple[DIMModel, list[dict]]:
    """Seeded pretraining loop; returns the model and per-step loss records.

    The VQ encoders stay bit-identical throughout (audited at the end). When
    ``ckpt_dir`` is given, a rolling checkpoint is written after every epoch.
    """
    cfg = config or model.config
    before = _vq_encoder_fingerprint(model)
    torch.manual_seed(cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    targets_s, targets_l = batch_targets(model, corpus)
    speaker_frames = torch.stack(
        [torch.as_tensor(s.speaker.frames, dtype=model.dtype) for s in corpus]
    )
    listener_frames = torch.stack(
        [torch.as_tensor(s.listener.frames, dtype=model.dtype) for s in corpus]
    )

    curves = []
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch])).permutation(
            len(corpus)
        )
        for start in range(0, len(corpus), cfg.batch_size):
            idx = torch.as_tensor(order[start : start + cfg.batch_size])
            batch = [corpus[i] for i in idx.tolist()]
            batch_seed = derive_mask_seed(cfg.seed, epoch * 100003 + step, "speaker")
            out = dim_forward(model, batch, seed=batch_seed)
            losses = dim_losses(
                out,
                targets_s[idx],
                targets_l[idx],
                speaker_frames[idx],
                listener_frames[idx],
                cfg.lambda1,
                cfg.lambda2,
                cfg.tau,
                symmetric_contrastive=cfg.symmetric_contrastive,
            )
            if not torch.isfinite(losses["total"]):
                raise DivergenceError(f"non-finite pretraining loss at step {step}")
            opt.zero_grad()
            losses["total"].backward()
            opt.step()
            curves.append(
                {
                    "step": step,
                    "total": losses["total"].item(),
                    "L_c": losses["L_c"].item(),
                    "L_rec_s": losses["L_rec_s"].item(),
                    "L_rec_l": losses["L_rec_l"].item(),
                }
            )
            step += 1
        if ckpt_dir is not None:
            save_dim_checkpoint(model, ckpt_dir, epoch=epoch, loss_history=curves)
    model.eval()
    if _vq_encoder_fingerprint(model) != before:
        raise RuntimeError("freeze contract violated: VQ encoder parameters changed")
    return model, curves


def write_loss_csv(curves: list[dict], path) -> None:
    lines = ["step,total,L_c,L_rec_s,L_rec_l"]
    for row in curves:
        lines.append(
            f"{row['step']},{row['total']:.8g},{row['L_c']:.8g},"
            f"{row['L_rec_s']:.8g},{row['L_rec_l']:.8g}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_dim_checkpoint(model: DIMModel, ckpt_dir, epoch: int = 0, loss_history=None) -> None:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    params = []
    for name, tensor in model.state_dict().items():
        fname = name.replace(".", "__") + ".dimt"
        save_tensor_file(tensor.numpy().astype(np.float32), ckpt_dir / fname)
        params.append(name)
    manifest = {
        "kind": "dim",
        "config": asdict(model.config),
        "vq_speaker_config": asdict(model.vq_speaker.config),
        "vq_listener_config": asdict(model.vq_listener.config),
        "params": params,
        "epoch": epoch,
        "loss_history": loss_history or [],
    }
    (ckpt_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dim_checkpoint(ckpt_dir) -> DIMModel:
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / "manifest.json"
    if not manifest_path.exists():
        raise MissingPrerequisiteError(f"no DIM checkpoint at {ckpt_dir}")
    manifest = json.loads(manifest_path.read_text())
    vq_s = VQModel("speaker", VQConfig(**manifest["vq_speaker_config"]))
    vq_l = VQModel("listener", VQConfig(**manifest["vq_listener_config"]))
    model = DIMModel(DIMConfig(**manifest["config"]), vq_s, vq_l)
    state = {
        name: torch.as_tensor(load_tensor_file(ckpt_dir / (name.replace(".", "__") + ".dimt")))
        for name in manifest["params"]
    }
    model.load_state_dict(state)
    model.eval()
    return model
