"""Elastic weight consolidation: empirical Fisher diagonal, snapshots, penalty."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping

import numpy as np

from . import tensor as T
from .nn import INFER, Network
from .tensor import Tensor

logger = logging.getLogger(__name__)


def _frozen(arrays: Mapping[str, np.ndarray]) -> Mapping[str, np.ndarray]:
    out = {}
    for name, arr in arrays.items():
        a = np.array(arr, dtype=T.DTYPE, copy=True)
        a.flags.writeable = False
        out[name] = a
    return MappingProxyType(out)


@dataclass(frozen=True)
class ParameterSnapshot:
    """Read-only copies of the origin-task optimum, keyed by parameter name."""

    params: Mapping[str, np.ndarray]
    source: str = ""

    def __post_init__(self):
        object.__setattr__(self, "params", _frozen(self.params))


@dataclass(frozen=True)
class FisherDiagonal:
    values: Mapping[str, np.ndarray]
    sample_count: int

    def __post_init__(self):
        for name, v in self.values.items():
            if np.any(np.asarray(v) < 0):
                raise ValueError(f"negative Fisher entry for {name}")
        object.__setattr__(self, "values", _frozen(self.values))


@dataclass(frozen=True)
class EwcConfig:
    lam: float = 0.0

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")


DEFAULT_LAMBDA_GRID = (0.0, 0.005, 0.05, 0.5, 1.0, 10.0, 1e3, 1e5)


def snapshot_parameters(network: Network, source: str = "") -> ParameterSnapshot:
    return ParameterSnapshot({n: p.data for n, p in network.trainable_parameters().items()},
                             source)


def compute_fisher_diagonal(network: Network, dataset, sample_count: int,
                            seed: int = 0) -> FisherDiagonal:
    """Mean squared gradient of the true-label log-likelihood, one sample at a time.

    Runs in the infer phase, so batch-norm uses its stored statistics and
    dropout is off.  ``sample_count`` samples are drawn without replacement.
    """
    images, labels = dataset.images, dataset.labels
    if sample_count <= 0:
        raise ValueError("sample_count must be positive")
    if sample_count > len(labels):
        raise ValueError(f"sample_count {sample_count} exceeds dataset size {len(labels)}")
    params = network.trainable_parameters()
    if not params:
        raise ValueError("network has no trainable parameters")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(labels), size=sample_count, replace=False))
    acc = {n: np.zeros(p.shape, dtype=np.float64) for n, p in params.items()}
    for i in idx:
        network.zero_grad()
        logits = network.forward(images[i:i + 1], INFER)
        # -log p(y|x); its square equals that of the log-likelihood gradient
        T.backward(T.softmax_cross_entropy(logits, labels[i:i + 1]))
        for n, p in params.items():
            if p.grad is not None:
                acc[n] += p.grad.astype(np.float64) ** 2
    network.zero_grad()
    return FisherDiagonal({n: a / sample_count for n, a in acc.items()}, sample_count)


def ewc_penalty(network: Network, snapshot: ParameterSnapshot, fisher: FisherDiagonal,
                config: EwcConfig) -> Tensor:
    """``sum_i lam/2 * F_i * (theta_i - theta*_i)^2`` over the trainable parameters.

    Parameters missing from the snapshot or Fisher contribute nothing and are
    logged.
    """
    total: Tensor = Tensor(0.0)
    missing = []
    for name, p in network.trainable_parameters().items():
        if name not in snapshot.params or name not in fisher.values:
            missing.append(name)
            continue
        anchor = snapshot.params[name]
        weight = fisher.values[name]
        if anchor.shape != p.shape or weight.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: parameter {p.shape}, "
                             f"snapshot {anchor.shape}, fisher {weight.shape}")
        if config.lam == 0:
            continue
        diff = T.sub(p, Tensor(anchor))
        term = T.tensor_sum(T.mul(T.mul(diff, diff), Tensor(weight * (config.lam / 2.0))))
        total = T.add(total, term)
    if missing:
        logger.info("EWC penalty skips parameters without an anchor: %s", missing)
    return total


def combined_loss(task_loss: Tensor, penalty: Tensor) -> Tensor:
    return T.add(task_loss, penalty)


def mean_abs_drift(network: Network, snapshot: ParameterSnapshot) -> float:
    """Mean ``|theta - theta*|`` over every snapshotted scalar."""
    params = network.named_parameters()
    total, count = 0.0, 0
    for name, anchor in snapshot.params.items():
        d = np.abs(params[name].data.astype(np.float64) - anchor)
        total += float(d.sum())
        count += d.size
    return total / max(count, 1)


__all__ = ["ParameterSnapshot", "FisherDiagonal", "EwcConfig", "DEFAULT_LAMBDA_GRID",
           "snapshot_parameters", "compute_fisher_diagonal", "ewc_penalty",
           "combined_loss", "mean_abs_drift"]
