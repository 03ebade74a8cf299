"""Fine-tuning freeze contracts, generation contracts, and baselines."""

import copy
import dataclasses

import numpy as np
import pytest
import torch

from dyadmotion.data import AudioFeatureSequence, MotionSequence
from dyadmotion.finetune import (
    FinetuneConfig,
    GeneratorModel,
    MirrorBaseline,
    NearestMotionBaseline,
    RandomBaseline,
    _param_bytes,
    _run_finetune,
    finetune_listener,
    finetune_speaker,
    generate_listener,
    generate_listener_tokens,
    generate_speaker,
    scratch_like,
)

FT = FinetuneConfig(task="listener", epochs=1, batch_size=4, learning_rate=1e-3, seed=0)


# ---------------------------------------------------------------------------
# Freeze contracts
# ---------------------------------------------------------------------------


def test_listener_finetune_freezes_vq_encoders(tiny_dim_model, tiny_corpus):
    before_enc = _param_bytes(tiny_dim_model.vq_listener.encoder)
    before_cb = _param_bytes(tiny_dim_model.vq_listener.codebook)
    before_spk = _param_bytes(tiny_dim_model.vq_speaker.encoder)
    gen = finetune_listener(tiny_dim_model, tiny_corpus, FT)
    assert gen.task == "listener"
    assert _param_bytes(gen.model.vq_listener.encoder) == before_enc
    assert _param_bytes(gen.model.vq_listener.codebook) == before_cb
    assert _param_bytes(gen.model.vq_speaker.encoder) == before_spk
    # the source model itself is untouched (fine-tuning works on a copy)
    assert _param_bytes(tiny_dim_model.vq_listener.encoder) == before_enc


def test_listener_finetune_decoder_freeze_flag(tiny_dim_model, tiny_corpus):
    before_dec = _param_bytes(tiny_dim_model.vq_listener.decoder)
    frozen = finetune_listener(
        tiny_dim_model, tiny_corpus, dataclasses.replace(FT, unfreeze_vq_decoder=False)
    )
    assert _param_bytes(frozen.model.vq_listener.decoder) == before_dec
    unfrozen = finetune_listener(
        tiny_dim_model, tiny_corpus, dataclasses.replace(FT, unfreeze_vq_decoder=True)
    )
    assert _param_bytes(unfrozen.model.vq_listener.decoder) != before_dec


def test_speaker_finetune_freezes_encoders(tiny_dim_model, tiny_corpus):
    before = {
        "enc_s": _param_bytes(tiny_dim_model.enc_speaker),
        "enc_l": _param_bytes(tiny_dim_model.enc_listener),
        "enc_joint": _param_bytes(tiny_dim_model.enc_joint),
        "vq_s_enc": _param_bytes(tiny_dim_model.vq_speaker.encoder),
    }
    gen = finetune_speaker(
        tiny_dim_model, tiny_corpus, dataclasses.replace(FT, task="speaker")
    )
    assert gen.task == "speaker"
    assert _param_bytes(gen.model.enc_speaker) == before["enc_s"]
    assert _param_bytes(gen.model.enc_listener) == before["enc_l"]
    assert _param_bytes(gen.model.enc_joint) == before["enc_joint"]
    assert _param_bytes(gen.model.vq_speaker.encoder) == before["vq_s_enc"]
    # the task's own decoder group did move
    assert _param_bytes(gen.model.dec_joint) != _param_bytes(tiny_dim_model.dec_joint)


def test_finetune_audit_detects_violation(tiny_dim_model, tiny_corpus):
    model = copy.deepcopy(tiny_dim_model)
    # deliberately mark an audited module trainable: the epoch audit must fire
    with pytest.raises(RuntimeError, match="freeze contract violated"):
        _run_finetune(
            model,
            tiny_corpus[:4],
            FT,
            trainable=[model.dec_joint, model.vq_listener.codebook],
            loss_roles=("listener",),
            p_s=0.0,
            p_l=100.0,
            frozen_audits={"listener VQ codebook": model.vq_listener.codebook},
        )


def test_scratch_like_differs_but_same_vq(tiny_dim_model):
    scratch = scratch_like(tiny_dim_model, seed=1)
    assert _param_bytes(scratch.proj_speaker) != _param_bytes(tiny_dim_model.proj_speaker)
    assert _param_bytes(scratch.vq_speaker) == _param_bytes(tiny_dim_model.vq_speaker)
    assert scratch.config == tiny_dim_model.config


def test_finetune_config_validation():
    with pytest.raises(ValueError):
        FinetuneConfig(task="narrator")
    with pytest.raises(ValueError):
        FinetuneConfig(init="lucky")


# ---------------------------------------------------------------------------
# Generation contracts
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def listener_gen(tiny_dim_model, tiny_corpus):
    return finetune_listener(tiny_dim_model, tiny_corpus, FT)


def test_generate_listener_shape_and_determinism(listener_gen, tiny_corpus):
    s = tiny_corpus[0]
    a = generate_listener(listener_gen, s.speaker, s.audio)
    b = generate_listener(listener_gen, s.speaker, s.audio)
    assert a.frames.shape == (s.speaker.T, 56)
    assert np.array_equal(a.frames, b.frames)


def test_generate_listener_tokens_match_decode(listener_gen, tiny_corpus):
    s = tiny_corpus[0]
    tokens = generate_listener_tokens(listener_gen, s.speaker, s.audio)
    vq = listener_gen.model.vq_listener
    with torch.no_grad():
        emb = vq.codebook.weight[torch.as_tensor(tokens)]
        frames = vq.windows_to_frames(vq.decoder(emb), s.speaker.T).numpy()
    motion = generate_listener(listener_gen, s.speaker, s.audio)
    assert np.array_equal(motion.frames, frames)


def test_generate_listener_task_check(tiny_dim_model, tiny_corpus):
    wrong = GeneratorModel(model=tiny_dim_model, task="speaker")
    s = tiny_corpus[0]
    with pytest.raises(ValueError, match="listener"):
        generate_listener(wrong, s.speaker, s.audio)


def test_generate_speaker_follows_audio_length(tiny_dim_model, tiny_corpus):
    gen = finetune_speaker(
        tiny_dim_model, tiny_corpus, dataclasses.replace(FT, task="speaker")
    )
    audio = tiny_corpus[0].audio
    out = generate_speaker(gen, audio)
    assert out.frames.shape == (audio.T, 56)
    again = generate_speaker(gen, audio)
    assert np.array_equal(out.frames, again.frames)
    with pytest.raises(ValueError, match="speaker"):
        generate_speaker(GeneratorModel(model=tiny_dim_model, task="listener"), audio)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def test_mirror_constant_preserved():
    const = MotionSequence(np.full((12, 56), 0.4, dtype=np.float32))
    out = MirrorBaseline(window=5).generate(const)
    assert np.allclose(out.frames, 0.4, atol=1e-6)
    assert out.frames.shape == const.frames.shape


def test_mirror_smooths_variance(tiny_corpus):
    s = tiny_corpus[0].speaker
    out = MirrorBaseline(window=5).generate(s)
    assert out.frames.var(axis=0).mean() < s.frames.var(axis=0).mean()


def test_random_baseline_sigma_zero_returns_training_listener(tiny_corpus):
    base = RandomBaseline(tiny_corpus, seed=0, sigma=0.0)
    out = base.generate(tiny_corpus[0].speaker)
    stored = [s.listener.frames.tobytes() for s in tiny_corpus]
    assert out.frames.tobytes() in stored


def test_random_baseline_seeded(tiny_corpus):
    a = RandomBaseline(tiny_corpus, seed=3).generate(tiny_corpus[0].speaker)
    b = RandomBaseline(tiny_corpus, seed=3).generate(tiny_corpus[0].speaker)
    assert np.array_equal(a.frames, b.frames)


def test_nearest_baseline_self_query(tiny_corpus):
    base = NearestMotionBaseline(tiny_corpus)
    s = tiny_corpus[2]
    out = base.generate(s.speaker)
    assert np.array_equal(out.frames, s.listener.frames)


def test_nearest_baseline_length_fitting(tiny_corpus):
    base = NearestMotionBaseline(tiny_corpus)
    T = tiny_corpus[0].speaker.T
    longer = MotionSequence(
        np.concatenate([tiny_corpus[2].speaker.frames] * 2, axis=0)
    )
    out = base.generate(longer)
    assert out.frames.shape == (2 * T, 56)
    # padding repeats the last stored listener frame
    assert np.array_equal(out.frames[T:], np.repeat(tiny_corpus[2].listener.frames[-1:], T, axis=0))


def test_baselines_reject_empty_corpus():
    with pytest.raises(ValueError):
        RandomBaseline([], seed=0)
    with pytest.raises(ValueError):
        NearestMotionBaseline([])
