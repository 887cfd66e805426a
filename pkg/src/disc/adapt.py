"""Forward-only re-estimation of BN statistics on unlabeled data.

Each incoming batch is pushed through the frozen model with every BN layer in
statistics-update mode. The momentum starts at ``rho0`` and decays towards a
floor, ``rho_k = rho_{k-1} * omega + zeta``, so early batches move the
estimates quickly and later ones refine them. Adaptation stops once the
statistics have been stable for ``window`` consecutive batches.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ConfigError, InsufficientDataError, NumericError
from .stats_bank import StatsSnapshot, capture
from .tensor_nn import Model


@dataclass(frozen=True)
class AdaptConfig:
    rho0: float = 0.1
    omega: float = 0.94
    zeta: float = 0.005
    batch_size: int = 16
    max_batches: int = 100
    tol: float = 1e-3
    window: int = 3

    def __post_init__(self):
        if not 0 < self.rho0 <= 1:
            raise ConfigError(f"rho0 must lie in (0, 1], got {self.rho0}")
        if not 0 < self.omega < 1:
            raise ConfigError(f"omega must lie in (0, 1), got {self.omega}")
        if self.zeta < 0:
            raise ConfigError("zeta must be >= 0")
        if self.zeta / (1 - self.omega) > self.rho0:
            raise ConfigError("momentum floor zeta / (1 - omega) exceeds rho0")
        if not self.tol > 0 or self.window < 1 or self.batch_size < 2 or self.max_batches < 1:
            raise ConfigError("tol must be > 0, window >= 1, batch_size >= 2, max_batches >= 1")

    @property
    def momentum_floor(self) -> float:
        return self.zeta / (1 - self.omega)


@dataclass
class AdaptReport:
    batches_used: int = 0
    momentum: list[float] = field(default_factory=list)
    max_rel_change: list[float] = field(default_factory=list)
    converged: bool = False

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["batch_index", "momentum", "max_rel_change"])
            for k, (rho, change) in enumerate(zip(self.momentum, self.max_rel_change)):
                w.writerow([k, repr(rho), repr(change)])


def momentum_schedule(k: int, cfg: AdaptConfig = AdaptConfig()) -> float:
    if k < 0:
        raise ConfigError("batch index must be >= 0")
    rho = cfg.rho0
    for _ in range(k):
        rho = rho * cfg.omega + cfg.zeta
    return min(max(rho, np.finfo(float).tiny), 1.0)


def momentum_trace(n: int, cfg: AdaptConfig = AdaptConfig()) -> list[float]:
    out, rho = [], cfg.rho0
    for _ in range(n):
        out.append(min(rho, 1.0))
        rho = rho * cfg.omega + cfg.zeta
    return out


def convergence_check(trace, tol: float, window: int) -> bool:
    """True iff the last ``window`` entries of ``trace`` are all below ``tol``."""
    if len(trace) == 0:
        raise ValueError("convergence_check needs a non-empty trace")
    return len(trace) >= window and all(c < tol for c in trace[-window:])


def _bn_stats(model: Model) -> list[tuple[np.ndarray, np.ndarray]]:
    return [
        (model.buffers[l.pkey("running_mean")], model.buffers[l.pkey("running_var")]) for l in model.bn_layers
    ]


def max_relative_change(before, after) -> float:
    """Largest |d mean| / (|mean| + 1) or |d var| / (var + 1) over all layers and channels."""
    worst = 0.0
    for (m0, v0), (m1, v1) in zip(before, after):
        m0, v0, m1, v1 = (a.astype(np.float64) for a in (m0, v0, m1, v1))
        worst = max(
            worst,
            float(np.max(np.abs(m1 - m0) / (np.abs(m0) + 1.0))),
            float(np.max(np.abs(v1 - v0) / (v0 + 1.0))),
        )
    return worst


def adapt(
    model: Model,
    batches: Iterable[np.ndarray],
    cfg: AdaptConfig = AdaptConfig(),
    *,
    task_id: str = "adapted",
) -> tuple[StatsSnapshot, AdaptReport]:
    """Adapt the model's BN running statistics in place and capture them.

    ``batches`` yields unlabeled NCHW arrays; at most ``cfg.max_batches`` are
    consumed. No gradients are computed and no trainable parameter changes.
    The model is left in eval mode.
    """
    fingerprint = model.parameter_fingerprint()
    report = AdaptReport()
    original_momenta = [l.momentum for l in model.bn_layers]
    rho = cfg.rho0
    model.train()
    try:
        for k, batch in enumerate(batches):
            if k >= cfg.max_batches:
                break
            batch = np.asarray(batch, dtype=model.dtype)
            if batch.ndim != 4 or batch.shape[0] < 2:
                raise InsufficientDataError(f"adaptation batch {k} has shape {batch.shape}; need N >= 2")
            model.set_bn_momentum(min(rho, 1.0))
            before = [(m.copy(), v.copy()) for m, v in _bn_stats(model)]
            model.run(batch, check_finite=True)
            for layer in model.bn_layers:
                if not np.all(np.isfinite(model.buffers[layer.pkey("running_var")])):
                    raise NumericError(f"non-finite running statistics in layer {layer.key!r}")
            report.momentum.append(min(rho, 1.0))
            report.max_rel_change.append(max_relative_change(before, _bn_stats(model)))
            report.batches_used = k + 1
            rho = rho * cfg.omega + cfg.zeta
            if convergence_check(report.max_rel_change, cfg.tol, cfg.window):
                report.converged = True
                break
    finally:
        for layer, m in zip(model.bn_layers, original_momenta):
            layer.momentum = m
        model.eval()
    if report.batches_used == 0:
        raise InsufficientDataError("adaptation stream yielded no batches")
    snapshot = capture(model, task_id, batches=report.batches_used, source="adapt")
    if snapshot.model_fingerprint != fingerprint:
        raise NumericError("trainable parameters changed during adaptation")
    return snapshot, report


def iterate_batches(images: np.ndarray, batch_size: int, seed: int | None = None, drop_last: bool = True):
    """Yield (optionally seeded-shuffled) batches of ``images``."""
    n = images.shape[0]
    order = np.random.default_rng(seed).permutation(n) if seed is not None else np.arange(n)
    stop = n - n % batch_size if drop_last else n
    for i in range(0, stop, batch_size):
        yield images[order[i : i + batch_size]]
