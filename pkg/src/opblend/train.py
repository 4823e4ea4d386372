"""Optimizer, schedule, augmentation and the multi-stage learning strategies.

Training is patch-based: each step samples aligned random crops, applies
random horizontal/vertical flips to both images of a pair, runs the network
forward on a fresh gradient tape and takes one Adam step. Everything is
driven by a single seeded generator, so a full run is reproducible bit for
bit.

A strategy is an ordered list of stages; the first initializes randomly and
every later stage starts from the preceding stage's final weights. The
``single`` preset trains the effect operator and then keeps training the
same network to map the input back to itself, yielding a second blendable
model from one labeled dataset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import GradTape, Tensor
from .blocks import DsanConfig, bind_dsan, dsan_forward, infer_dsan_config, init_dsan_params
from .data import DatasetError, DatasetManifest, sample_patches
from .metrics import LossConfig, smoothing_loss
from .weights import ParamSet

__all__ = [
    "TrainConfig",
    "AdamState",
    "StageSpec",
    "StrategyPlan",
    "EpochStat",
    "TrainingDiverged",
    "STRATEGY_NAMES",
    "adam_step",
    "lr_schedule",
    "augment",
    "train_operator",
    "strategy_plan",
    "run_strategy",
]

ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    """The loss became non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and sampling hyperparameters.

    Defaults follow the published recipe: Adam with beta1=0.1 and
    beta2=0.999, initial learning rate 2e-4, halved every 100 epochs.
    ``steps_per_epoch`` defaults to one pass over the training records.
    """

    lr0: float = 2e-4
    beta1: float = 0.1
    beta2: float = 0.999
    decay_factor: float = 0.5
    decay_period: int = 100
    epochs: int = 200
    batch: int = 4
    patch: int = 64
    seed: int = 0
    steps_per_epoch: int | None = None
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"Adam betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if not 0 < self.decay_factor <= 1:
            raise ValueError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.decay_period < 1 or self.epochs < 0 or self.batch < 1:
            raise ValueError("decay_period and batch must be >= 1, epochs >= 0")
        if self.patch < 2 or self.patch % 2:
            raise ValueError(f"patch must be even and >= 2, got {self.patch}")


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators and the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: ParamSet) -> "AdamState":
        return cls(
            m={n: np.zeros_like(a) for n, a in params.entries},
            v={n: np.zeros_like(a) for n, a in params.entries},
        )


def adam_step(
    state: AdamState,
    params: ParamSet,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.1,
    beta2: float = 0.999,
) -> ParamSet:
    """One bias-corrected Adam update; mutates ``state``, returns new params."""
    state.step += 1
    b1, b2 = beta1, beta2
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    out = []
    for name, p in params.entries:
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        g = g.astype(p.dtype, copy=False)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        out.append((name, p - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)))
    return ParamSet(out, meta=dict(params.meta))


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Stepped descent: lr0 * decay_factor ** floor(epoch / decay_period)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_period)


def augment(pair, rng):
    """Random horizontal and/or vertical flip, applied identically to both
    (C, H, W) images of the pair, each with independent probability 0.5."""
    x, y = pair
    if x.shape != y.shape:
        raise ValueError(f"augment: pair shapes {x.shape} and {y.shape} differ")
    if rng.random() < 0.5:
        x, y = x[:, :, ::-1], y[:, :, ::-1]
    if rng.random() < 0.5:
        x, y = x[:, ::-1, :], y[:, ::-1, :]
    # copies keep writes back into the source batch safe
    return np.ascontiguousarray(x), np.ascontiguousarray(y)


@dataclass
class EpochStat:
    epoch: int
    mean_loss: float
    lr: float

    def line(self) -> str:
        return f"{self.epoch},{self.mean_loss:.8f},{self.lr:.8g}"


def train_operator(
    params: ParamSet,
    data: DatasetManifest,
    cfg: TrainConfig,
    dsan_cfg: DsanConfig | None = None,
    rng_seed=None,
) -> tuple[ParamSet, list[EpochStat]]:
    """Minimize the smoothing loss over sampled patches.

    Returns the final parameters and the per-epoch mean loss trace. A
    non-finite loss aborts with the offending epoch/step. Deterministic
    under a fixed seed.
    """
    if dsan_cfg is None:
        dsan_cfg = infer_dsan_config(params)
    data.validate()
    n_train = len(data.split_records("train"))
    if n_train == 0:
        raise DatasetError(f"manifest {data.path} has no training records")
    steps = cfg.steps_per_epoch or max(1, math.ceil(n_train / cfg.batch))
    rng = np.random.default_rng(cfg.seed if rng_seed is None else rng_seed)
    state = AdamState.zeros(params)
    cache: dict = {}
    trace: list[EpochStat] = []
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg, epoch)
        losses = []
        for step in range(steps):
            xb, yb = sample_patches(data, cfg.patch, cfg.batch, rng, "train", cache)
            for i in range(cfg.batch):
                xb[i], yb[i] = augment((xb[i], yb[i]), rng)
            tape = GradTape()
            model = bind_dsan(params, dsan_cfg, tape)
            pred = dsan_forward(model, Tensor(xb))
            loss = smoothing_loss(pred, Tensor(yb), cfg.loss)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch}, batch {step}"
                )
            tape.backward(loss)
            grads = {name: tape.grad(t) for name, t in model.entries}
            params = adam_step(state, params, grads, lr, cfg.beta1, cfg.beta2)
            losses.append(value)
        trace.append(EpochStat(epoch, float(np.mean(losses)), lr))
    return params, trace


# ---------------------------------------------------------------------------
# strategies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StageSpec:
    """One training stage: which dataset, how to initialize, what to call
    the resulting model."""

    dataset: str
    init: str  # "random" | "previous"
    name: str
    epochs: int | None = None


@dataclass(frozen=True)
class StrategyPlan:
    stages: tuple[StageSpec, ...]

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a strategy needs at least one stage")
        if self.stages[0].init != "random":
            raise ValueError("the first stage must initialize randomly")
        for s in self.stages[1:]:
            if s.init != "previous":
                raise ValueError(
                    f"stage {s.name!r}: later stages must initialize from the previous stage"
                )


STRATEGY_NAMES = ("a2b2a", "b2a", "b2a2b", "single")


def strategy_plan(name: str) -> StrategyPlan:
    """Named presets.

    a2b2a: random->A0, A0->B, B->A (blend the pair A, B)
    b2a:   random->B0, B0->A
    b2a2b: random->B0, B0->A, A->B
    single: random->effect, then keep training on input==label pairs to get
    the identity-end partner model.
    """
    plans = {
        "a2b2a": (
            StageSpec("a", "random", "modelA0"),
            StageSpec("b", "previous", "modelB"),
            StageSpec("a", "previous", "modelA"),
        ),
        "b2a": (
            StageSpec("b", "random", "modelB0"),
            StageSpec("a", "previous", "modelA"),
        ),
        "b2a2b": (
            StageSpec("b", "random", "modelB0"),
            StageSpec("a", "previous", "modelA"),
            StageSpec("b", "previous", "modelB"),
        ),
        "single": (
            StageSpec("effect", "random", "modelEffect"),
            StageSpec("identity", "previous", "modelIdentity"),
        ),
    }
    if name not in plans:
        raise ValueError(f"unknown strategy {name!r}; expected one of {STRATEGY_NAMES}")
    return StrategyPlan(plans[name])


def run_strategy(
    plan: StrategyPlan,
    datasets: dict[str, DatasetManifest],
    cfg: TrainConfig,
    dsan_cfg: DsanConfig | None = None,
) -> tuple[dict[str, ParamSet], dict[str, list[EpochStat]]]:
    """Execute the stages in order; returns models and loss traces by name.

    Stage k > 0 starts from the exact final parameters of stage k-1, so the
    emitted models are always blend-compatible.
    """
    dsan_cfg = dsan_cfg or DsanConfig()
    for stage in plan.stages:
        if stage.dataset not in datasets:
            raise KeyError(
                f"stage {stage.name!r} needs dataset {stage.dataset!r}; "
                f"available: {sorted(datasets)}"
            )
    models: dict[str, ParamSet] = {}
    traces: dict[str, list[EpochStat]] = {}
    params = None
    for i, stage in enumerate(plan.stages):
        params = init_dsan_params(dsan_cfg, cfg.seed) if stage.init == "random" else params
        stage_cfg = cfg if stage.epochs is None else replace(cfg, epochs=stage.epochs)
        try:
            params, trace = train_operator(
                params, datasets[stage.dataset], stage_cfg, dsan_cfg, rng_seed=[cfg.seed, i]
            )
        except TrainingDiverged as e:
            raise TrainingDiverged(f"stage {stage.name!r}: {e}") from e
        models[stage.name] = params
        traces[stage.name] = trace
    return models, traces
