"""Batch normalization with explicit train/eval semantics.

Train mode normalizes with the statistics of the incoming batch (biased
variance) and folds them into the running estimates with momentum ``rho``::

    running_mean = (1 - rho) * running_mean + rho * batch_mean
    running_var  = (1 - rho) * running_var  + rho * batch_var * n / (n - 1)

Eval mode normalizes with the running estimates and leaves the state alone.
All functions here are pure; callers own the state.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DegenerateBatchError, ShapeError

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1

_REDUCE_AXES = (0, 2, 3)


@dataclass(frozen=True)
class BatchNormState:
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
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {c}")
        if len(c) != 1:
            raise ShapeError("batch-norm arrays must be one-dimensional")
        if not self.eps > 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        _check_momentum(self.momentum)
        if np.any(self.running_var < 0):
            raise ConfigError("running variance must be non-negative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def identity(cls, channels: int, dtype=np.float32, **kwargs) -> BatchNormState:
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            **kwargs,
        )


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray


def _check_momentum(rho: float) -> None:
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"momentum must lie in (0, 1], got {rho}")


def _check_input(x: np.ndarray, state: BatchNormState) -> None:
    if x.ndim != 4:
        raise ShapeError(f"expected an NCHW tensor, got shape {x.shape}")
    if x.shape[1] != state.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, state has {state.channels}")


def _per_channel(v: np.ndarray) -> np.ndarray:
    return v.reshape(1, -1, 1, 1)


def bn_forward_eval(x: np.ndarray, state: BatchNormState) -> np.ndarray:
    _check_input(x, state)
    dtype = x.dtype
    scale = state.gamma.astype(dtype) / np.sqrt(state.running_var.astype(dtype) + dtype.type(state.eps))
    return (x - _per_channel(state.running_mean.astype(dtype))) * _per_channel(scale) + _per_channel(
        state.beta.astype(dtype)
    )


def batch_statistics(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance over N, H, W."""
    mean = x.mean(axis=_REDUCE_AXES)
    var = np.square(x - _per_channel(mean)).mean(axis=_REDUCE_AXES)
    return mean, var


def _train_forward(x: np.ndarray, state: BatchNormState):
    _check_input(x, state)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if n < 2:
        raise DegenerateBatchError(
            f"batch norm needs at least 2 values per channel in train mode, got {n}"
        )
    dtype = x.dtype
    mean = x.mean(axis=_REDUCE_AXES)
    centered = x - _per_channel(mean)
    var = np.einsum("nchw,nchw->c", centered, centered) / dtype.type(n)
    inv_std = 1.0 / np.sqrt(var + dtype.type(state.eps))
    x_hat = centered * _per_channel(inv_std)
    gamma = state.gamma.astype(dtype)
    y = x_hat * _per_channel(gamma) + _per_channel(state.beta.astype(dtype))
    unbiased = var * dtype.type(n / (n - 1))
    updated = bn_update_stats(state, mean, unbiased, state.momentum)
    return y, updated, mean, var, BatchNormCache(x_hat, inv_std, gamma)


def bn_forward_train(x: np.ndarray, state: BatchNormState):
    """Normalize ``x`` by its own batch statistics.

    Returns ``(y, updated_state, batch_mean, batch_var)`` where ``batch_var``
    is the biased variance used for normalization. The running variance in
    ``updated_state`` absorbs the unbiased (n / (n - 1)) estimate.
    """
    y, updated, mean, var, _ = _train_forward(x, state)
    return y, updated, mean, var


def bn_backward_train(dy: np.ndarray, cache: BatchNormCache):
    """Gradients of the train-mode transform w.r.t. input, gamma and beta."""
    x_hat, inv_std = cache.x_hat, cache.inv_std
    n = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dbeta = dy.sum(axis=_REDUCE_AXES)
    dgamma = np.einsum("nchw,nchw->c", dy, x_hat)
    scale = _per_channel(cache.gamma * inv_std / dy.dtype.type(n))
    dx = (dy * dy.dtype.type(n) - _per_channel(dbeta) - x_hat * _per_channel(dgamma)) * scale
    return dx, dgamma, dbeta


def bn_backward_eval(dy: np.ndarray, state: BatchNormState, x: np.ndarray):
    """Gradients of the eval-mode transform (running statistics are constants)."""
    dtype = dy.dtype
    inv_std = 1.0 / np.sqrt(state.running_var.astype(dtype) + dtype.type(state.eps))
    x_hat = (x - _per_channel(state.running_mean.astype(dtype))) * _per_channel(inv_std)
    dbeta = dy.sum(axis=_REDUCE_AXES)
    dgamma = (dy * x_hat).sum(axis=_REDUCE_AXES)
    dx = dy * _per_channel(state.gamma.astype(dtype) * inv_std)
    return dx, dgamma, dbeta


def bn_update_stats(
    state: BatchNormState, batch_mean: np.ndarray, batch_var: np.ndarray, rho: float
) -> BatchNormState:
    _check_momentum(rho)
    if batch_mean.shape != state.running_mean.shape or batch_var.shape != state.running_var.shape:
        raise ShapeError("batch statistics do not match the state's channel count")
    dtype = state.running_mean.dtype
    r = dtype.type(rho)
    keep = dtype.type(1.0) - r
    mean = keep * state.running_mean + r * batch_mean.astype(dtype)
    var = keep * state.running_var + r * batch_var.astype(dtype)
    return replace(state, running_mean=mean, running_var=var)
