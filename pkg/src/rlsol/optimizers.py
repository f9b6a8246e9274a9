"""Update-stage optimizers.

Plain sliding-window batch / mini-batch gradient descent baselines, EMA
parameter combination, and the precision-preconditioned gradient descent
that retains memory of discarded data.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, DivergenceError, InputError
from .linalg import as_matrix
from .rls import (
    RlsConfig,
    RlsState,
    SampleBlock,
    accumulate_correlations,
    block_virtual_input,
    lse_cost,
    update_precision,
)


@dataclass
class GdConfig:
    learning_rate: float
    iterations: int = 5
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.iterations < 1:
            raise ConfigError("iterations must be at least 1")
        if self.weight_decay < 0.0:
            raise ConfigError("weight decay must be non-negative")


# Learning-rate defaults for the preconditioned conv update stage: short
# streams converge with the larger rate, long streams need the smaller one.
DEFAULT_LEARNING_RATE_SHORT = 3e-2
DEFAULT_LEARNING_RATE_LONG = 3e-3


@dataclass
class EmaConfig:
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"EMA coefficient must lie in [0, 1], got {self.alpha}")


EMA_PRESETS = {
    "slow": EmaConfig(alpha=0.01),
    "moderate": EmaConfig(alpha=0.5),
    "fast": EmaConfig(alpha=0.99),
}


@dataclass
class SlidingWindow:
    """Fixed-capacity block store; pushing beyond capacity evicts the oldest."""

    capacity: int
    blocks: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigError("window capacity must be positive")
        self.blocks = deque(self.blocks, maxlen=self.capacity)

    def push(self, block: SampleBlock) -> None:
        self.blocks.append(block)

    def __len__(self) -> int:
        return len(self.blocks)

    def as_list(self) -> list[SampleBlock]:
        return list(self.blocks)

    def flatten(self) -> SampleBlock:
        """All window samples concatenated into one block."""
        if not self.blocks:
            raise InputError("window is empty")
        xs = np.vstack([b.x for b in self.blocks])
        ys = np.vstack([b.y for b in self.blocks])
        weights = None
        if any(b.weights is not None for b in self.blocks):
            weights = np.concatenate(
                [b.weights if b.weights is not None else np.ones(b.size) for b in self.blocks]
            )
        return SampleBlock(x=xs, y=ys, weights=weights)


def bgd_update(
    w: np.ndarray, window: SlidingWindow, config: GdConfig, rls_cfg: RlsConfig
) -> np.ndarray:
    """Batch gradient descent over the window correlations.

    Iterates W <- W - eta (W Phi - Z) starting from the provided weights.
    Raises DivergenceError if the window cost increases for 3 consecutive
    iterations.
    """
    if len(window) == 0:
        raise InputError("window is empty")
    blocks = window.as_list()
    corr = accumulate_correlations(blocks, rls_cfg)
    w = as_matrix(w, "weights").copy()
    cost_prev = lse_cost(w, blocks, rls_cfg)
    rising = 0
    for it in range(config.iterations):
        w = w - config.learning_rate * (w @ corr.phi_mat - corr.z_mat)
        cost = lse_cost(w, blocks, rls_cfg)
        rising = rising + 1 if cost > cost_prev else 0
        if rising >= 3:
            raise DivergenceError(it)
        cost_prev = cost
    return w


def mbsgd_update(
    w: np.ndarray,
    window: SlidingWindow,
    config: GdConfig,
    batch_size: int,
    seed: int,
) -> np.ndarray:
    """Mini-batch SGD over the flattened window, deterministic given the seed.

    Each iteration steps W <- W - eta (grad + lambda W) with the data
    gradient averaged over the current mini-batch; samples are reshuffled
    once per epoch.
    """
    pooled = window.flatten()
    total = pooled.size
    if batch_size < 1 or batch_size > total:
        raise ConfigError(
            f"batch size {batch_size} must lie in [1, {total}] for this window"
        )
    w = as_matrix(w, "weights").copy()
    rng = np.random.default_rng(seed)
    order = rng.permutation(total)
    cursor = 0
    for _ in range(config.iterations):
        if cursor + batch_size > total:
            order = rng.permutation(total)
            cursor = 0
        idx = order[cursor : cursor + batch_size]
        cursor += batch_size
        bx, by = pooled.x[idx], pooled.y[idx]
        grad = (w @ bx.T - by.T) @ bx / batch_size
        w = w - config.learning_rate * (grad + config.weight_decay * w)
    return w


def precond_gd_iterate(
    w: np.ndarray, grad: np.ndarray, p_mat: np.ndarray, eta: float
) -> np.ndarray:
    """One preconditioned step W <- W - eta grad P."""
    w = as_matrix(w, "weights")
    grad = as_matrix(grad, "gradient")
    p_mat = as_matrix(p_mat, "preconditioner")
    if grad.shape != w.shape:
        raise DimensionError(f"gradient shape {grad.shape} != weights shape {w.shape}")
    if p_mat.shape != (w.shape[1], w.shape[1]):
        raise DimensionError(
            f"preconditioner shape {p_mat.shape} incompatible with weights {w.shape}"
        )
    return w - eta * grad @ p_mat


def precond_update_stage(
    w: np.ndarray, block: SampleBlock, state: RlsState, config: GdConfig
) -> tuple[np.ndarray, RlsState]:
    """Memory-retaining update stage for one data block.

    Advances the precision matrix exactly once with the block's virtual
    input, then runs the configured number of preconditioned steps using
    the real block gradient at each iterate. Weight decay enters through
    the multiplicative factor W (I - eta lambda P).
    """
    x_bar, _ = block_virtual_input(block)
    state = update_precision(state, x_bar)
    w = as_matrix(w, "weights").copy()
    bx, by = block.weighted_rows()
    for _ in range(config.iterations):
        grad = (w @ bx.T - by.T) @ bx / block.size
        if config.weight_decay:
            grad = grad + config.weight_decay * w
        w = precond_gd_iterate(w, grad, state.p_mat, config.learning_rate)
    return w, state


def ema_combine(w_prev: np.ndarray, w_new: np.ndarray, config: EmaConfig) -> np.ndarray:
    """Convex combination (1 - alpha) w_prev + alpha w_new."""
    w_prev = as_matrix(w_prev, "previous weights")
    w_new = as_matrix(w_new, "new weights")
    if w_prev.shape != w_new.shape:
        raise DimensionError(f"shape mismatch {w_prev.shape} vs {w_new.shape}")
    return (1.0 - config.alpha) * w_prev + config.alpha * w_new
