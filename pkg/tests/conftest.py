"""Shared fixtures: tiny corpora and models sized for fast unit tests."""

import dataclasses

import numpy as np
import pytest
import torch

from dyadmotion.data import SynthConfig, synth_dyads
from dyadmotion.pretrain import DIMConfig, DIMModel
from dyadmotion.vq import VQConfig, VQModel, init_codebook_from_data, train_vq

TINY_VQ = VQConfig(
    codebook_size=16,
    code_dim=8,
    stride=2,
    hidden_dim=16,
    n_layers=2,
    learning_rate=1e-3,
    steps=60,
    batch_size=16,
    seed=0,
)

TINY_DIM = DIMConfig(
    model_dim=16,
    layers=1,
    heads=2,
    intermediate=32,
    epochs=1,
    batch_size=4,
    learning_rate=1e-3,
    seed=0,
)

TINY_SYNTH = SynthConfig(n_clips=6, T=32, lag=2, seed=0)


@pytest.fixture(scope="session")
def tiny_corpus():
    return synth_dyads(TINY_SYNTH)


@pytest.fixture(scope="session")
def tiny_vq_pair(tiny_corpus):
    models = {}
    for role in ("speaker", "listener"):
        motions = [getattr(s, role) for s in tiny_corpus]
        models[role], _ = train_vq(motions, TINY_VQ, role=role)
    return models


@pytest.fixture(scope="session")
def tiny_dim_model(tiny_vq_pair):
    torch.manual_seed(0)
    return DIMModel(TINY_DIM, tiny_vq_pair["speaker"], tiny_vq_pair["listener"])


@pytest.fixture
def untrained_vq():
    torch.manual_seed(0)
    return VQModel("speaker", TINY_VQ)


def make_motion(T=16, seed=0):
    rng = np.random.default_rng(seed)
    from dyadmotion.data import MotionSequence

    return MotionSequence(rng.normal(size=(T, 56)).astype(np.float32))
