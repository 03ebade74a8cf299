"""Motion/audio data model, tensor file format, masking, and the synthetic dyad corpus.

Motion is represented as per-frame coefficient vectors with 50 expression
dimensions followed by 6 pose dimensions (56 columns total). A dyadic sample
pairs a speaker motion, a listener motion, and the speaker's audio features
for one clip.

Tensors cross process boundaries through the DIMT file format, which is
bit-exact and little-endian:

    magic "DIMT" (4 bytes) | version u32 | ndim u32 | dims ndim*u64 |
    dtype u8 (1=float32, 2=int32) | payload row-major
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EXPR_DIM = 50
POSE_DIM = 6
MOTION_DIM = EXPR_DIM + POSE_DIM

MAGIC = b"DIMT"
FORMAT_VERSION = 1
_DTYPE_TO_CODE = {np.dtype("<f4"): 1, np.dtype("<i4"): 2}
_CODE_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<i4")}


class TensorFormatError(ValueError):
    """Base error for malformed DIMT files."""


class BadMagicError(TensorFormatError):
    pass


class VersionMismatchError(TensorFormatError):
    pass


class UnknownDtypeError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


def save_tensor_file(array: np.ndarray, path) -> None:
    """Write ``array`` (float32 or int32) to ``path`` in DIMT format."""
    array = np.ascontiguousarray(array)
    dtype = array.dtype.newbyteorder("<")
    if dtype not in _DTYPE_TO_CODE:
        raise ValueError(f"unsupported dtype {array.dtype}; use float32 or int32")
    code = _DTYPE_TO_CODE[dtype]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, array.ndim))
        f.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        f.write(struct.pack("<B", code))
        f.write(array.astype(dtype, copy=False).tobytes(order="C"))


def load_tensor_file(path) -> np.ndarray:
    """Read a DIMT file back into a numpy array; inverse of :func:`save_tensor_file`."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise TruncatedPayloadError(f"{path}: truncated header")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {FORMAT_VERSION}")
    off = 12
    if len(raw) < off + 8 * ndim + 1:
        raise TruncatedPayloadError(f"{path}: truncated dims")
    shape = struct.unpack_from(f"<{ndim}Q", raw, off)
    off += 8 * ndim
    (code,) = struct.unpack_from("<B", raw, off)
    off += 1
    if code not in _CODE_TO_DTYPE:
        raise UnknownDtypeError(f"{path}: unknown dtype code {code}")
    dtype = _CODE_TO_DTYPE[code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    expected = count * dtype.itemsize
    payload = raw[off:]
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"{path}: payload {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


@dataclass
class MotionSequence:
    """T x 56 per-frame motion coefficients (50 expression + 6 pose)."""

    frames: np.ndarray
    frame_rate_hz: float = 25.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[1] != MOTION_DIM:
            raise ValueError(f"frames must be T x {MOTION_DIM}, got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValueError("need at least one frame")
        if not np.isfinite(self.frames).all():
            raise ValueError("frames contain non-finite values")
        if self.frame_rate_hz <= 0:
            raise ValueError("frame_rate_hz must be positive")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def expression(self) -> np.ndarray:
        return self.frames[:, :EXPR_DIM]

    @property
    def pose(self) -> np.ndarray:
        return self.frames[:, EXPR_DIM:]


@dataclass
class AudioFeatureSequence:
    """T_a x D_a precomputed audio features for one clip."""

    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"features must be T_a x D_a, got {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain non-finite values")

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class DyadicSample:
    """One clip: aligned speaker motion, listener motion and speaker audio."""

    speaker: MotionSequence
    listener: MotionSequence
    audio: AudioFeatureSequence
    clip_id: str

    def __post_init__(self):
        if not (self.speaker.T == self.listener.T == self.audio.T):
            raise ValueError(
                f"misaligned clip {self.clip_id}: speaker T={self.speaker.T}, "
                f"listener T={self.listener.T}, audio T={self.audio.T}"
            )


@dataclass
class MaskMap:
    """Sorted set of masked frame indices for a sequence of length T."""

    masked_indices: np.ndarray
    T: int
    p: float

    def __post_init__(self):
        self.masked_indices = np.asarray(self.masked_indices, dtype=np.int64)
        expected = mask_count(self.T, self.p)
        if len(self.masked_indices) != expected:
            raise ValueError(
                f"mask has {len(self.masked_indices)} indices, expected {expected}"
            )
        if len(self.masked_indices) and (
            self.masked_indices.min() < 0 or self.masked_indices.max() >= self.T
        ):
            raise ValueError("mask indices out of range")

    def bool_mask(self) -> np.ndarray:
        out = np.zeros(self.T, dtype=bool)
        out[self.masked_indices] = True
        return out


def mask_count(T: int, p: float) -> int:
    # round-half-to-even, matching Python's banker's rounding
    return int(round(p * T / 100.0))


def uniform_mask(T: int, p: float, seed: int) -> MaskMap:
    """Draw round(p/100*T) distinct frame indices uniformly without replacement."""
    if not 0 <= p <= 100:
        raise ValueError(f"mask percentage {p} outside [0, 100]")
    if T < 1:
        raise ValueError("T must be >= 1")
    m = mask_count(T, p)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(T, size=m, replace=False))
    return MaskMap(masked_indices=idx, T=T, p=p)


def align_audio(audio: AudioFeatureSequence, T_target: int) -> AudioFeatureSequence:
    """Linearly interpolate audio features along time to exactly T_target frames."""
    if T_target < 1:
        raise ValueError("T_target must be >= 1")
    feats = audio.features
    if feats.shape[0] == T_target:
        return AudioFeatureSequence(features=feats.copy())
    if feats.shape[0] == 1:
        return AudioFeatureSequence(features=np.repeat(feats, T_target, axis=0))
    t_old = np.linspace(0.0, 1.0, feats.shape[0])
    t_new = np.linspace(0.0, 1.0, T_target)
    out = np.stack(
        [np.interp(t_new, t_old, feats[:, d].astype(np.float64)) for d in range(feats.shape[1])],
        axis=1,
    )
    return AudioFeatureSequence(features=out.astype(np.float32))


# ---------------------------------------------------------------------------
# Synthetic dyadic-conversation corpus
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    """Controls the synthetic dyad generator.

    Speaker motion is a smooth sum of seeded sinusoids plus a per-clip discrete
    behavior-mode offset. Listener motion is a fixed linear map of the speaker
    motion delayed by ``lag`` frames, plus a mode-dependent offset and Gaussian
    noise. Audio is a fixed noisy linear projection of the speaker motion.
    """

    n_clips: int = 20
    T: int = 64
    lag: int = 4
    noise: float = 0.01
    n_modes: int = 4
    seed: int = 0
    audio_dim: int = 64
    amplitude: float = 1.0
    n_sinusoids: int = 6
    coupling_mix: float = 0.2
    identity_coupling: bool = False
    audio_noise: float = 0.01

    def __post_init__(self):
        if self.lag >= self.T:
            raise ValueError("lag must be < T")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.n_modes < 1:
            raise ValueError("n_modes must be >= 1")

    def motion_bound(self) -> float:
        """Conservative per-entry bound on any generated motion coefficient."""
        mix = 0.0 if self.identity_coupling else self.coupling_mix
        a = self.amplitude
        return a * (1.0 + mix * np.sqrt(MOTION_DIM)) + 0.1 * a + 6.0 * self.noise


@dataclass
class SynthParams:
    """Fixed (seed-derived) coupling maps shared by all clips of one corpus."""

    expr_map: np.ndarray  # 50 x 50
    pose_map: np.ndarray  # 6 x 6
    speaker_offsets: np.ndarray  # n_modes x 56
    listener_offsets: np.ndarray  # n_modes x 56
    audio_proj: np.ndarray  # 56 x D_a
    mixing: np.ndarray  # n_sinusoids x 56, maps base sinusoids to motion dims


def make_synth_params(cfg: SynthConfig) -> SynthParams:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    mix = 0.0 if cfg.identity_coupling else cfg.coupling_mix

    def mixed_identity(d):
        r = rng.normal(size=(d, d))
        r /= np.linalg.norm(r, axis=1, keepdims=True)
        return (1.0 - mix) * np.eye(d) + mix * r

    expr_map = mixed_identity(EXPR_DIM)
    pose_map = mixed_identity(POSE_DIM)
    speaker_offsets = rng.uniform(-1, 1, (cfg.n_modes, MOTION_DIM)) * 0.2 * cfg.amplitude
    listener_scale = 0.0 if cfg.identity_coupling else 0.1 * cfg.amplitude
    listener_offsets = rng.uniform(-1, 1, (cfg.n_modes, MOTION_DIM)) * listener_scale
    audio_proj = rng.normal(size=(MOTION_DIM, cfg.audio_dim)) / np.sqrt(MOTION_DIM)
    mixing = rng.normal(size=(cfg.n_sinusoids, MOTION_DIM))
    mixing /= np.abs(mixing).sum(axis=0, keepdims=True)  # per-dim L1 norm 1
    return SynthParams(
        expr_map, pose_map, speaker_offsets, listener_offsets, audio_proj, mixing
    )


def listener_from_speaker(
    speaker_frames: np.ndarray, mode: int, params: SynthParams, cfg: SynthConfig
) -> np.ndarray:
    """Deterministic (noise-free) part of the listener response, float32.

    listener[t] = map(speaker[max(t - lag, 0)]) + listener_offsets[mode]
    computed in float64 from the float32 speaker frames, then cast.
    """
    T = speaker_frames.shape[0]
    t = np.arange(T)
    delayed = speaker_frames[np.clip(t - cfg.lag, 0, None)].astype(np.float64)
    expr = delayed[:, :EXPR_DIM] @ params.expr_map.T
    pose = delayed[:, EXPR_DIM:] @ params.pose_map.T
    out = np.concatenate([expr, pose], axis=1) + params.listener_offsets[mode]
    return out.astype(np.float32)


def synth_dyads(cfg: SynthConfig) -> list[DyadicSample]:
    """Generate the synthetic corpus; deterministic per ``cfg.seed``."""
    params = make_synth_params(cfg)
    t = np.arange(cfg.T, dtype=np.float64)
    samples = []
    for c in range(cfg.n_clips):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, c]))
        mode = int(rng.integers(cfg.n_modes))

        # per-clip base sinusoids, mixed into motion dims by the corpus-level map;
        # clips then share a low-dimensional smooth structure plus mode offsets
        freq = rng.uniform(0.5, 4.0, cfg.n_sinusoids)
        phase = rng.uniform(0, 2 * np.pi, cfg.n_sinusoids)
        amp = rng.uniform(0.2, 1.0, cfg.n_sinusoids)
        amp *= 0.8 * cfg.amplitude / amp.sum()
        basis = amp[None] * np.sin(2 * np.pi * freq[None] * t[:, None] / cfg.T + phase[None])
        speaker64 = basis @ params.mixing + params.speaker_offsets[mode]
        speaker32 = speaker64.astype(np.float32)

        listener32 = listener_from_speaker(speaker32, mode, params, cfg)
        if cfg.noise > 0:
            noise = rng.normal(0.0, cfg.noise, listener32.shape)
            listener32 = (listener32.astype(np.float64) + noise).astype(np.float32)

        audio64 = speaker32.astype(np.float64) @ params.audio_proj
        if cfg.audio_noise > 0:
            audio64 = audio64 + rng.normal(0.0, cfg.audio_noise, audio64.shape)

        samples.append(
            DyadicSample(
                speaker=MotionSequence(speaker32),
                listener=MotionSequence(listener32),
                audio=AudioFeatureSequence(audio64.astype(np.float32)),
                clip_id=f"clip{c:04d}",
            )
        )
    return samples


def synth_modes(cfg: SynthConfig) -> list[int]:
    """Behavior mode drawn for each clip (same draw order as synth_dyads)."""
    modes = []
    for c in range(cfg.n_clips):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, c]))
        modes.append(int(rng.integers(cfg.n_modes)))
    return modes


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    """Index of a split's clips; paths are relative to the manifest's directory."""

    samples: list = field(default_factory=list)  # dicts: clip_id/speaker/listener/audio
    split: str = "train"
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {"split": self.split, "seed": self.seed, "samples": self.samples},
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        m = cls(samples=doc["samples"], split=doc["split"], seed=doc["seed"])
        ids = [s["clip_id"] for s in m.samples]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate clip_ids in manifest")
        return m


def save_corpus(samples: list[DyadicSample], out_dir, split: str, seed: int) -> Path:
    """Write DIMT files plus a manifest JSON; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        paths = {
            "speaker": f"{s.clip_id}_speaker.dimt",
            "listener": f"{s.clip_id}_listener.dimt",
            "audio": f"{s.clip_id}_audio.dimt",
        }
        save_tensor_file(s.speaker.frames, out_dir / paths["speaker"])
        save_tensor_file(s.listener.frames, out_dir / paths["listener"])
        save_tensor_file(s.audio.features, out_dir / paths["audio"])
        entries.append({"clip_id": s.clip_id, **paths})
    manifest = DatasetManifest(samples=entries, split=split, seed=seed)
    path = out_dir / f"manifest_{split}.json"
    path.write_text(manifest.to_json())
    return path


def load_corpus(manifest_path) -> list[DyadicSample]:
    manifest_path = Path(manifest_path)
    manifest = DatasetManifest.from_json(manifest_path.read_text())
    base = manifest_path.parent
    samples = []
    for e in manifest.samples:
        for key in ("speaker", "listener", "audio"):
            if not (base / e[key]).exists():
                raise FileNotFoundError(f"manifest references missing file {e[key]}")
        samples.append(
            DyadicSample(
                speaker=MotionSequence(load_tensor_file(base / e["speaker"])),
                listener=MotionSequence(load_tensor_file(base / e["listener"])),
                audio=AudioFeatureSequence(load_tensor_file(base / e["audio"])),
                clip_id=e["clip_id"],
            )
        )
    return samples
