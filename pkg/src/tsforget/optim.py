"""Adam with decoupled weight decay, and the epoch/minibatch training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .forecaster import Params, backward, zeros_like
from .pipeline import WindowSet

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 64
    epochs: int = 5
    shuffle_seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class AdamState:
    m: Params
    v: Params
    t: int = 0

    @classmethod
    def zeros(cls, params: Params) -> "AdamState":
        return cls(zeros_like(params), zeros_like(params), 0)


def adam_step(params: Params, grads: Params, state: AdamState, cfg: TrainConfig):
    """One Adam update with decoupled weight decay.

    Returns new ``(params, state)``; the inputs are left untouched.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient in {k!r}")
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_p[k] = p - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon) - cfg.lr * cfg.weight_decay * p
        new_m[k] = m
        new_v[k] = v
    return new_p, AdamState(new_m, new_v, t)


def n_batches(n_windows: int, batch_size: int) -> int:
    return -(-n_windows // batch_size)


def epoch_order(n_windows: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    """Window permutation for one epoch, seeded by ``shuffle_seed XOR epoch``."""
    rng = np.random.default_rng(int(shuffle_seed) ^ int(epoch))
    return rng.permutation(n_windows)


@dataclass
class TrainResult:
    params: Params
    epoch_losses: list[float]
    step_losses: list[float] = field(default_factory=list)
    state: AdamState | None = None

    def __iter__(self):
        # unpacks as (params, epoch_losses)
        return iter((self.params, self.epoch_losses))


def train(params: Params, windows: WindowSet, cfg: TrainConfig,
          state: AdamState | None = None) -> TrainResult:
    """Run ``cfg.epochs`` epochs of shuffled minibatch Adam on ``windows``.

    ``epoch_losses[e]`` is the mean per-window MSE seen during epoch ``e``
    (each batch's loss measured before its update). The last batch of an
    epoch may be short. Any non-finite loss, gradient or parameter aborts.
    """
    n = len(windows)
    if n == 0:
        raise ValueError("cannot train on an empty window set")
    state = state or AdamState.zeros(params)
    epoch_losses: list[float] = []
    step_losses: list[float] = []
    for epoch in range(cfg.epochs):
        order = epoch_order(n, cfg.shuffle_seed, epoch)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = backward(params, windows.contexts[idx], windows.targets[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became {loss} at epoch {epoch}, step {state.t + 1}")
            params, state = adam_step(params, grads, state, cfg)
            for k, p in params.items():
                if not np.all(np.isfinite(p)):
                    raise TrainingDivergedError(f"parameter {k!r} became non-finite at step {state.t}")
            step_losses.append(loss)
            total += loss * len(idx)
        epoch_losses.append(total / n)
        log.debug("epoch %d/%d loss %.6g", epoch + 1, cfg.epochs, epoch_losses[-1])
    return TrainResult(params, epoch_losses, step_losses, state)
