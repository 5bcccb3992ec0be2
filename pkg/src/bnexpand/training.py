"""Adam, the epoch loop with early stopping, fine-tuning modes, and evaluation."""
from __future__ import annotations

import enum
import logging
import sys
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data import LabeledDataset, augment
from .ewc import (EwcConfig, FisherDiagonal, ParameterSnapshot, combined_loss,
                  compute_fisher_diagonal, ewc_penalty, snapshot_parameters)
from .metrics import ConfusionMatrix, accuracy, linear_weighted_kappa
from .nn import INFER, TRAIN, Network, freeze_non_bn, set_stats_source
from .tensor import Tensor

logger = logging.getLogger(__name__)


class FinetuneMode(str, enum.Enum):
    SCRATCH = "scratch"
    ALL_LAYERS = "all_layers"
    BN_ONLY = "bn_only"


class StatsSource(str, enum.Enum):
    SELF_LIVE = "self_live"
    FROZEN_ORIGIN = "frozen_origin"


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-7
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update; moments are kept in float64.

    Parameters are rebound to fresh arrays rather than written in place.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data.astype(np.float64) - update).astype(T.DTYPE)


# ---------------------------------------------------------------------------
# configuration and results

@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 5
    seed: int = 0
    finetune_mode: FinetuneMode = FinetuneMode.SCRATCH
    stats_source: StatsSource = StatsSource.SELF_LIVE
    ewc: EwcConfig | None = None
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-7
    augment: bool = False
    fisher_samples: int = 2048
    quiet: bool = True

    def __post_init__(self):
        self.finetune_mode = FinetuneMode(self.finetune_mode)
        self.stats_source = StatsSource(self.stats_source)
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 for batch statistics")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    val_kappa: float


@dataclass
class FitResult:
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_val_accuracy: float
    stopped_epoch: int
    history: list[EpochRecord]
    network: Network | None = None
    snapshot: ParameterSnapshot | None = None
    fisher: FisherDiagonal | None = None


@dataclass
class EvalMetrics:
    accuracy: float
    kappa: float
    loss: float
    count: int


class EarlyStopping:
    """Track the best score; signal a stop after ``patience`` epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_score = -np.inf
        self.best_epoch = 0
        self.since_best = 0

    def update(self, epoch: int, score: float) -> tuple[bool, bool]:
        """Return ``(improved, stop)``."""
        if score > self.best_score:
            self.best_score, self.best_epoch, self.since_best = score, epoch, 0
            return True, False
        self.since_best += 1
        return False, self.since_best >= self.patience


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def evaluate(network: Network, dataset: LabeledDataset, stats_source=None,
             group_level: bool = False) -> EvalMetrics:
    """Infer-phase accuracy, linear-weighted kappa, and mean cross-entropy.

    ``stats_source`` (a network, checkpoint, or state mapping) evaluates a copy
    whose BN layers use that source's running statistics.
    """
    net = network
    if stats_source is not None:
        net = network.copy()
        set_stats_source(net, stats_source)
    probs = net.predict_proba(dataset.images)
    labels = dataset.labels
    loss = float(-np.mean(np.log(np.clip(probs[np.arange(len(labels)), labels], 1e-12, None))))
    if group_level:
        if dataset.groups is None:
            raise ValueError("dataset has no group ids")
        from .metrics import group_average_predictions
        per_group = group_average_predictions(probs, dataset.groups)
        first = {}
        for g, y in zip(dataset.groups.tolist(), labels.tolist()):
            first.setdefault(g, y)
        keys = list(per_group)
        preds = np.array([per_group[g] for g in keys])
        labels = np.array([first[g] for g in keys])
    else:
        preds = probs.argmax(axis=1)
    cm = ConfusionMatrix.from_predictions(labels, preds, dataset.class_count)
    try:
        kappa = linear_weighted_kappa(cm)
    except ValueError:
        kappa = float("nan")
    return EvalMetrics(accuracy(preds, labels), kappa, loss, int(len(labels)))


def _progress(epoch: int, train_loss: float, val_acc: float) -> None:
    sys.stdout.write(f"epoch,{epoch},train_loss,{train_loss:.6f},val_acc,{val_acc:.6f}\n")
    sys.stdout.flush()


def fit(network: Network, train_set: LabeledDataset, val_set: LabeledDataset,
        config: TrainConfig, penalty_fn: Callable[[Network], Tensor] | None = None,
        on_epoch: Callable[[EpochRecord], None] | None = None) -> FitResult:
    """Minibatch Adam with early stopping on validation accuracy.

    The network is left holding the best epoch's state.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be nonempty")
    network.reseed(config.seed)
    state = AdamState(config.lr, config.beta1, config.beta2, config.adam_eps)
    stopper = EarlyStopping(config.patience)
    history: list[EpochRecord] = []
    best_state = network.state_dict()
    n = len(train_set)
    stopped = 0
    for epoch in range(1, config.max_epochs + 1):
        order = _epoch_order(n, config.seed, epoch)
        losses = []
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            if idx.size < 2:
                continue  # a single leftover sample cannot form batch statistics
            x = train_set.images[idx]
            if config.augment:
                x = augment(x, int(np.random.SeedSequence([config.seed, epoch, b])
                                   .generate_state(1)[0]))
            params = network.trainable_parameters()
            network.zero_grad()
            logits = network.forward(x, TRAIN)
            loss = T.softmax_cross_entropy(logits, train_set.labels[idx])
            if penalty_fn is not None:
                loss = combined_loss(loss, penalty_fn(network))
            T.backward(loss)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            adam_step(params, grads, state)
            losses.append(loss.item())
        metrics = evaluate(network, val_set)
        record = EpochRecord(epoch, float(np.mean(losses)) if losses else float("nan"),
                             metrics.loss, metrics.accuracy, metrics.kappa)
        history.append(record)
        if not config.quiet:
            _progress(epoch, record.train_loss, record.val_accuracy)
        if on_epoch is not None:
            on_epoch(record)
        improved, stop = stopper.update(epoch, metrics.accuracy)
        if improved:
            best_state = network.state_dict()
        stopped = epoch
        if stop:
            break
    network.zero_grad()
    network.load_state_dict(best_state)
    return FitResult(best_state, stopper.best_epoch, float(stopper.best_score), stopped,
                     history, network)


def prepare_finetune(network: Network, config: TrainConfig, origin_state=None,
                     origin_data: LabeledDataset | None = None,
                     fisher: FisherDiagonal | None = None):
    """Apply the fine-tune mode, statistics source, and EWC anchor to ``network``.

    Returns ``(snapshot, fisher, penalty_fn)``; the last two are ``None``
    without EWC.
    """
    if config.finetune_mode is FinetuneMode.BN_ONLY:
        freeze_non_bn(network)
    if config.stats_source is StatsSource.FROZEN_ORIGIN:
        set_stats_source(network, origin_state)
    if config.ewc is None:
        return None, None, None
    if fisher is None:
        if origin_data is None:
            raise ValueError("EWC needs the origin dataset to estimate the Fisher diagonal")
        fisher = compute_fisher_diagonal(network, origin_data,
                                         min(config.fisher_samples, len(origin_data)),
                                         seed=config.seed)
    snapshot = snapshot_parameters(network, source="origin")
    ewc_cfg = config.ewc

    def penalty_fn(net: Network) -> Tensor:
        return ewc_penalty(net, snapshot, fisher, ewc_cfg)

    return snapshot, fisher, penalty_fn


def finetune(origin, target_train: LabeledDataset, target_val: LabeledDataset,
             config: TrainConfig, origin_data: LabeledDataset | None = None,
             fisher: FisherDiagonal | None = None) -> FitResult:
    """Fine-tune a copy of the origin model on the target domain.

    ``origin`` is a :class:`Network` or a checkpoint (anything exposing
    ``build_network()``); the origin itself is never modified.
    """
    if isinstance(origin, Network):
        network = origin.copy()
        origin_state = origin.state_dict()
    else:
        network = origin.build_network()
        origin_state = origin.tensors
    if config.finetune_mode is FinetuneMode.SCRATCH:
        raise ValueError("fine-tuning needs ALL_LAYERS or BN_ONLY mode")
    network.set_trainable(None, True)
    snapshot, fisher, penalty_fn = prepare_finetune(network, config, origin_state,
                                                    origin_data, fisher)
    result = fit(network, target_train, target_val, config, penalty_fn)
    result.snapshot, result.fisher = snapshot, fisher
    return result


__all__ = ["FinetuneMode", "StatsSource", "AdamState", "adam_step", "TrainConfig",
           "EpochRecord", "FitResult", "EvalMetrics", "EarlyStopping", "evaluate", "fit",
           "prepare_finetune", "finetune"]
