"""Batch normalization with explicit running statistics.

The running mean/variance live in a plain :class:`BNState` so that they can be
read, snapshotted and swapped per domain without touching anything else in
the model. Moments are population (biased) moments over every axis except the
trailing channel axis: batch x spatial for 2-D inputs in NHWC layout, batch
only for 1-D ``(N, F)`` inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import NumericError, ShapeError

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1


@dataclass
class BNState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = DEFAULT_EPS
    momentum: float = DEFAULT_MOMENTUM

    def __post_init__(self):
        c = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != c:
                raise ShapeError(f"BNState.{name} has shape {getattr(self, name).shape}, expected {c}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0.0 < self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in (0, 1], got {self.momentum}")

    @classmethod
    def fresh(cls, channels: int, eps: float = DEFAULT_EPS, momentum: float = DEFAULT_MOMENTUM) -> "BNState":
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _check_channels(state: BNState, x: np.ndarray) -> None:
    if x.ndim < 2 or x.shape[-1] != state.channels:
        raise ShapeError(f"batchnorm expects trailing channel dim {state.channels}, got input shape {x.shape}")


def batch_moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel population mean and variance over all leading axes."""
    flat = x.reshape(-1, x.shape[-1])
    mean = flat.mean(axis=0)
    var = ((flat - mean) ** 2).mean(axis=0)
    return mean, var


def bn_forward_train(state: BNState, x: np.ndarray, return_cache: bool = False):
    """Normalize with batch moments, then fold them into the running statistics.

    Raises ``ShapeError`` when a channel sees fewer than two values, since the
    batch variance is then identically zero.
    """
    _check_channels(state, x)
    population = x.size // state.channels
    if population < 2:
        raise ShapeError(
            f"batchnorm needs at least 2 values per channel in train mode, got {population} "
            f"(input shape {x.shape})"
        )
    flat = x.reshape(-1, state.channels)
    mean = flat.mean(axis=0)
    xhat = flat - mean
    var = np.square(xhat).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat *= inv_std
    y = xhat * state.gamma
    y += state.beta
    xhat, y = xhat.reshape(x.shape), y.reshape(x.shape)

    a = state.momentum
    state.running_mean = a * mean + (1.0 - a) * state.running_mean
    state.running_var = a * var + (1.0 - a) * state.running_var
    if return_cache:
        return y, (xhat, inv_std, population)
    return y


def bn_forward_eval(state: BNState, x: np.ndarray) -> np.ndarray:
    _check_channels(state, x)
    return state.gamma * (x - state.running_mean) / np.sqrt(state.running_var + state.eps) + state.beta


def bn_backward_train(state: BNState, cache, dy: np.ndarray):
    """Gradients of the train-mode transform w.r.t. input, gamma and beta."""
    xhat, inv_std, m = cache
    c = dy.shape[-1]
    dy2, xhat2 = dy.reshape(-1, c), xhat.reshape(-1, c)
    dgamma = (dy2 * xhat2).sum(axis=0)
    dbeta = dy2.sum(axis=0)
    # dx = gamma * inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))
    dx = xhat2 * (dgamma / m)
    dx += dbeta / m
    np.subtract(dy2, dx, out=dx)
    dx *= state.gamma * inv_std
    return dx.reshape(dy.shape), dgamma, dbeta


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.array(a, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class BNSnapshot:
    """Read-only copy of every BN layer's (running mean, running variance)."""

    stats: tuple[tuple[np.ndarray, np.ndarray], ...]
    label: Any = None
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "stats", tuple((_frozen(m), _frozen(v)) for m, v in self.stats))
        object.__setattr__(self, "metadata", dict(self.metadata))

    @property
    def signature(self) -> tuple[int, ...]:
        return tuple(m.shape[0] for m, _ in self.stats)

    def relabel(self, label, **metadata) -> "BNSnapshot":
        return BNSnapshot(self.stats, label, {**self.metadata, **metadata})

    def equals(self, other: "BNSnapshot") -> bool:
        """Bitwise equality of the statistics (labels ignored)."""
        if self.signature != other.signature:
            return False
        return all(
            m1.tobytes() == m2.tobytes() and v1.tobytes() == v2.tobytes()
            for (m1, v1), (m2, v2) in zip(self.stats, other.stats)
        )


def bn_snapshot(model, label=None, **metadata) -> BNSnapshot:
    return BNSnapshot(
        tuple((s.running_mean, s.running_var) for s in model.bn_states()),
        label,
        metadata,
    )


def bn_restore(model, snapshot: BNSnapshot) -> None:
    states = model.bn_states()
    signature = tuple(s.channels for s in states)
    if signature != snapshot.signature:
        raise ShapeError(f"snapshot signature {snapshot.signature} does not match model BN layers {signature}")
    for state, (mean, var) in zip(states, snapshot.stats):
        state.running_mean = np.array(mean, dtype=state.running_mean.dtype, copy=True)
        state.running_var = np.array(var, dtype=state.running_var.dtype, copy=True)


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")
    return x
