"""Shared fixtures: synthetic desk-scale corpus and trained model pairs.

The slow training fixtures are session-scoped so the desk-scale experiments
(trend reproduction, determinism, single-label strategy) train once and are
asserted on from several tests.
"""

import os

# keep BLAS single-threaded: faster at these sizes on small boxes and one
# less source of run-to-run variation (must be set before numpy loads)
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np
import pytest

from opblend.blocks import DsanConfig
from opblend.data import ImageBuffer, make_dataset, write_image
from opblend.metrics import LossConfig
from opblend.train import (
    StageSpec,
    StrategyPlan,
    TrainConfig,
    run_strategy,
    strategy_plan,
)

DESK_CHANNELS = 8
DESK_DSAN = DsanConfig(channels=DESK_CHANNELS, in_channels=1)

# verified desk-scale recipes: A2B2A reaches ~34-39 dB per endpoint with a
# strictly monotone interpolation sweep; the single-label run uses a gentler
# rate and a longer identity stage, which keeps the identity model inside
# the effect model's linear neighborhood (monotone residual sweep) while
# still clearing 35 dB
A2B2A_CFG = TrainConfig(
    lr0=3e-3,
    epochs=60,
    batch=4,
    patch=32,
    seed=11,
    steps_per_epoch=10,
    decay_period=25,
    decay_factor=0.5,
    loss=LossConfig(phi=1.0),
)
SINGLE_CFG = TrainConfig(
    lr0=1e-3,
    epochs=100,
    batch=4,
    patch=32,
    seed=11,
    steps_per_epoch=10,
    decay_period=40,
    decay_factor=0.5,
    loss=LossConfig(phi=1.0),
)
SINGLE_PLAN = StrategyPlan(
    (
        StageSpec("effect", "random", "modelEffect", epochs=100),
        StageSpec("identity", "previous", "modelIdentity", epochs=200),
    )
)


def synth_image(rng, h=64, w=64) -> ImageBuffer:
    """Textured test image: smooth background, sinusoids, sharp rectangles,
    light noise (kept small so an identity mapping is learnable to 35+ dB)."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    c = rng.random(4)
    img = c[0] * (1 - yy) * (1 - xx) + c[1] * (1 - yy) * xx + c[2] * yy * (1 - xx) + c[3] * yy * xx
    for _ in range(2):
        freq = rng.uniform(3, 9)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        img += rng.uniform(0.05, 0.15) * np.sin(
            2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase
        )
    for _ in range(rng.integers(2, 5)):
        r0, c0 = rng.integers(0, h - 10), rng.integers(0, w - 10)
        rh, cw = rng.integers(6, h // 2), rng.integers(6, w // 2)
        img[r0 : r0 + rh, c0 : c0 + cw] += rng.uniform(-0.25, 0.25)
    img += 0.005 * rng.standard_normal((h, w))
    return ImageBuffer(np.clip(img, 0.02, 0.98).astype(np.float32)[:, :, None])


@pytest.fixture(scope="session")
def desk_corpus(tmp_path_factory):
    """20 synthetic 64x64 grayscale images."""
    rng = np.random.default_rng(101)
    inputs = tmp_path_factory.mktemp("corpus") / "inputs"
    inputs.mkdir()
    for i in range(20):
        write_image(synth_image(rng), inputs / f"img{i:02d}.pgm")
    return inputs


@pytest.fixture(scope="session")
def desk_datasets(desk_corpus, tmp_path_factory):
    """Manifests for effect A (sigma 1), effect B (sigma 3) and the gentler
    sigma-2 effect used by the single-label experiment."""
    root = tmp_path_factory.mktemp("datasets")
    return {
        "a": make_dataset(desk_corpus, root / "a", strength=1.0, seed=5),
        "b": make_dataset(desk_corpus, root / "b", strength=3.0, seed=5),
        "e2": make_dataset(desk_corpus, root / "e2", strength=2.0, seed=5),
    }


def train_a2b2a(datasets):
    return run_strategy(
        strategy_plan("a2b2a"), {"a": datasets["a"], "b": datasets["b"]}, A2B2A_CFG, DESK_DSAN
    )


@pytest.fixture(scope="session")
def a2b2a_run(desk_datasets):
    models, traces = train_a2b2a(desk_datasets)
    return models, traces


@pytest.fixture(scope="session")
def a2b2a_rerun(desk_datasets):
    models, traces = train_a2b2a(desk_datasets)
    return models, traces


@pytest.fixture(scope="session")
def single_run(desk_datasets):
    effect = desk_datasets["e2"]
    models, traces = run_strategy(
        SINGLE_PLAN,
        {"effect": effect, "identity": effect.identity_variant()},
        SINGLE_CFG,
        DESK_DSAN,
    )
    return models, traces
