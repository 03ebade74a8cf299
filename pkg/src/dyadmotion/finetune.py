"""Fine-tuning for listener- and speaker-motion generation, plus baselines.

Listener fine-tuning keeps the speaker stream unmasked and replaces the
listener stream entirely with mask tokens; only the listener reconstruction
loss is optimized and the VQ encoders stay frozen (the listener VQ decoder
is trainable unless configured otherwise). Speaker fine-tuning drives the
joint decoder from audio alone, updating only the joint-decoder group and
the speaker VQ decoder.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch

from .data import AudioFeatureSequence, DyadicSample, MotionSequence, align_audio
from .errors import DivergenceError
from .pretrain import (
    DIMModel,
    batch_targets,
    derive_mask_seed,
    dim_forward,
    dim_losses,
)


@dataclass
class FinetuneConfig:
    task: str = "listener"
    init: str = "pretrained"  # or "scratch"
    unfreeze_vq_decoder: bool = True
    learning_rate: float = 1e-5
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("listener", "speaker"):
            raise ValueError("task must be 'listener' or 'speaker'")
        if self.init not in ("pretrained", "scratch"):
            raise ValueError("init must be 'pretrained' or 'scratch'")


@dataclass
class GeneratorModel:
    model: DIMModel
    task: str


def scratch_like(pretrained: DIMModel, seed: int) -> DIMModel:
    """Fresh random DIM weights with the same architecture and VQ models."""
    torch.manual_seed(seed)
    model = DIMModel(
        pretrained.config,
        copy.deepcopy(pretrained.vq_speaker),
        copy.deepcopy(pretrained.vq_listener),
    )
    return model


def _param_bytes(module) -> bytes:
    return b"".join(t.detach().numpy().tobytes() for t in module.state_dict().values())


def _run_finetune(model, corpus, config, trainable, loss_roles, p_s, p_l, frozen_audits):
    """Shared fine-tune loop; ``frozen_audits`` maps names to modules audited per epoch."""
    for p in model.parameters():
        p.requires_grad_(False)
    for module in trainable:
        for p in module.parameters():
            p.requires_grad_(True)

    baselines = {name: _param_bytes(m) for name, m in frozen_audits.items()}
    torch.manual_seed(config.seed)
    opt = torch.optim.Adam(
        [p for p in model.parameters() if p.requires_grad], lr=config.learning_rate
    )
    targets_s, targets_l = batch_targets(model, corpus)
    dt = model.dtype
    speaker_frames = torch.stack([torch.as_tensor(s.speaker.frames, dtype=dt) for s in corpus])
    listener_frames = torch.stack([torch.as_tensor(s.listener.frames, dtype=dt) for s in corpus])

    step = 0
    model.train()
    for epoch in range(config.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([config.seed, 7, epoch])
        ).permutation(len(corpus))
        for start in range(0, len(corpus), config.batch_size):
            idx = torch.as_tensor(order[start : start + config.batch_size])
            batch = [corpus[i] for i in idx.tolist()]
            out = dim_forward(
                model,
                batch,
                seed=derive_mask_seed(config.seed, step, "speaker"),
                p_s=p_s,
                p_l=p_l,
            )
            losses = dim_losses(
                out,
                targets_s[idx],
                targets_l[idx],
                speaker_frames[idx],
                listener_frames[idx],
                lambda1=0.0,
                lambda2=1.0,
                tau=model.config.tau,
                roles=loss_roles,
            )
            if not torch.isfinite(losses["total"]):
                raise DivergenceError(f"non-finite fine-tuning loss at step {step}")
            opt.zero_grad()
            losses["total"].backward()
            opt.step()
            step += 1
        for name, module in frozen_audits.items():
            if _param_bytes(module) != baselines[name]:
                raise RuntimeError(f"freeze contract violated during fine-tuning: {name}")
    model.eval()
    return model


def finetune_listener(
    pretrained: DIMModel, corpus: list[DyadicSample], config: FinetuneConfig
) -> GeneratorModel:
    """Fine-tune for listener generation: speaker unmasked, listener fully masked."""
    model = (
        copy.deepcopy(pretrained)
        if config.init == "pretrained"
        else scratch_like(pretrained, config.seed)
    )
    trainable = [
        model.proj_speaker,
        model.proj_listener,
        model.audio_proj,
        model.enc_speaker,
        model.enc_listener,
        model.enc_joint,
        model.dec_joint,
        model.head_speaker,
        model.head_listener,
        model.embeddings,
    ]
    if config.unfreeze_vq_decoder:
        trainable.append(model.vq_listener.decoder)
    frozen_audits = {
        "listener VQ encoder": model.vq_listener.encoder,
        "listener VQ codebook": model.vq_listener.codebook,
        "speaker VQ encoder": model.vq_speaker.encoder,
    }
    if not config.unfreeze_vq_decoder:
        frozen_audits["listener VQ decoder"] = model.vq_listener.decoder
    model = _run_finetune(
        model, corpus, config, trainable, ("listener",), p_s=0.0, p_l=100.0, frozen_audits=frozen_audits
    )
    return GeneratorModel(model=model, task="listener")


def finetune_speaker(
    pretrained: DIMModel, corpus: list[DyadicSample], config: FinetuneConfig
) -> GeneratorModel:
    """Fine-tune for speech-driven speaker generation (audio alone drives decoding)."""
    model = (
        copy.deepcopy(pretrained)
        if config.init == "pretrained"
        else scratch_like(pretrained, config.seed)
    )
    trainable = [
        model.dec_joint,
        model.head_speaker,
        model.audio_proj,
        model.embeddings,
        model.vq_speaker.decoder,
    ]
    frozen_audits = {
        "speaker role encoder": model.enc_speaker,
        "listener role encoder": model.enc_listener,
        "joint encoder": model.enc_joint,
        "speaker VQ encoder": model.vq_speaker.encoder,
        "listener VQ encoder": model.vq_listener.encoder,
    }
    model = _run_finetune(
        model, corpus, config, trainable, ("speaker",), p_s=100.0, p_l=100.0, frozen_audits=frozen_audits
    )
    return GeneratorModel(model=model, task="speaker")


def _dummy_sample(speaker: MotionSequence, audio: AudioFeatureSequence) -> DyadicSample:
    zeros = MotionSequence(np.zeros((speaker.T, speaker.frames.shape[1]), dtype=np.float32))
    return DyadicSample(speaker=speaker, listener=zeros, audio=align_audio(audio, speaker.T), clip_id="query")


def generate_listener(
    gen: GeneratorModel, speaker: MotionSequence, audio: AudioFeatureSequence
) -> MotionSequence:
    """Greedy argmax listener motion for one speaker clip; same length as input."""
    if gen.task != "listener":
        raise ValueError("model was not fine-tuned for listener generation")
    with torch.no_grad():
        out = dim_forward(gen.model, [_dummy_sample(speaker, audio)], seed=0, p_s=0.0, p_l=100.0)
    return MotionSequence(out.hard_recon_l[0])


def generate_listener_tokens(gen: GeneratorModel, speaker: MotionSequence, audio) -> np.ndarray:
    """Argmax codebook indices backing :func:`generate_listener` (for audits)."""
    with torch.no_grad():
        out = dim_forward(gen.model, [_dummy_sample(speaker, audio)], seed=0, p_s=0.0, p_l=100.0)
    return out.logits_l[0].argmax(dim=1).numpy()


def generate_speaker(gen: GeneratorModel, audio: AudioFeatureSequence) -> MotionSequence:
    """Speaker motion from audio alone, aligned to the audio length."""
    if gen.task != "speaker":
        raise ValueError("model was not fine-tuned for speaker generation")
    if audio.T < 1:
        raise ValueError("empty audio")
    zeros = MotionSequence(np.zeros((audio.T, 56), dtype=np.float32))
    sample = DyadicSample(speaker=zeros, listener=zeros, audio=audio, clip_id="query")
    with torch.no_grad():
        out = dim_forward(gen.model, [sample], seed=0, p_s=100.0, p_l=100.0)
    return MotionSequence(out.hard_recon_s[0])


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def _fit_length(frames: np.ndarray, T: int) -> np.ndarray:
    if frames.shape[0] >= T:
        return frames[:T]
    pad = np.repeat(frames[-1:], T - frames.shape[0], axis=0)
    return np.concatenate([frames, pad], axis=0)


class RandomBaseline:
    """A training listener sequence plus a small seeded Gaussian perturbation."""

    def __init__(self, corpus: list[DyadicSample], seed: int, sigma: float = 0.05):
        if not corpus:
            raise ValueError("empty corpus")
        self.listeners = [s.listener.frames for s in corpus]
        self.sigma = sigma
        self.rng = np.random.default_rng(seed)

    def generate(self, speaker: MotionSequence, audio=None) -> MotionSequence:
        pick = self.listeners[self.rng.integers(len(self.listeners))]
        frames = _fit_length(pick, speaker.T).astype(np.float64)
        if self.sigma > 0:
            scale = self.sigma * frames.std(axis=0, keepdims=True)
            frames = frames + self.rng.normal(0.0, 1.0, frames.shape) * scale
        return MotionSequence(frames.astype(np.float32))


class NearestMotionBaseline:
    """Listener motion of the training speaker nearest in mean-pooled L2."""

    def __init__(self, corpus: list[DyadicSample]):
        if not corpus:
            raise ValueError("empty corpus")
        self.speaker_means = np.stack([s.speaker.frames.mean(axis=0) for s in corpus])
        self.listeners = [s.listener.frames for s in corpus]

    def generate(self, speaker: MotionSequence, audio=None) -> MotionSequence:
        q = speaker.frames.mean(axis=0)
        idx = int(((self.speaker_means - q) ** 2).sum(axis=1).argmin())
        return MotionSequence(_fit_length(self.listeners[idx], speaker.T))


class MirrorBaseline:
    """Moving-average-smoothed speaker motion used as the listener motion."""

    def __init__(self, window: int = 5):
        self.window = window

    def generate(self, speaker: MotionSequence, audio=None) -> MotionSequence:
        w = self.window
        half = w // 2
        padded = np.pad(speaker.frames.astype(np.float64), ((half, half), (0, 0)), mode="edge")
        kernel = np.ones(w) / w
        out = np.stack(
            [np.convolve(padded[:, d], kernel, mode="valid") for d in range(padded.shape[1])],
            axis=1,
        )
        return MotionSequence(out.astype(np.float32))


def baseline_random(corpus, seed: int, sigma: float = 0.05) -> RandomBaseline:
    return RandomBaseline(corpus, seed, sigma)


def baseline_nearest_motion(corpus) -> NearestMotionBaseline:
    return NearestMotionBaseline(corpus)


def baseline_mirror(window: int = 5) -> MirrorBaseline:
    return MirrorBaseline(window)
