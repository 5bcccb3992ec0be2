"""Accuracy, linearly weighted Cohen's kappa, group averaging, and BN variance probes."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import INFER, BatchNorm, Network, StatsMode


def accuracy(predictions, labels) -> float:
    p = np.asarray(predictions).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"{p.size} predictions for {y.size} labels")
    if p.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(p == y))


@dataclass(frozen=True)
class ConfusionMatrix:
    """K x K counts; rows are true classes, columns predictions."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {c.shape}")
        if np.any(c < 0):
            raise ValueError("confusion counts must be nonnegative")
        object.__setattr__(self, "counts", c)

    @classmethod
    def from_predictions(cls, labels, predictions, class_count: int) -> "ConfusionMatrix":
        counts = np.zeros((class_count, class_count), dtype=np.int64)
        np.add.at(counts, (np.asarray(labels, dtype=np.int64),
                           np.asarray(predictions, dtype=np.int64)), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def linear_weighted_kappa(cm: ConfusionMatrix) -> float:
    """Cohen's kappa with disagreement weights ``|i - j| / (K - 1)``.

    When chance disagreement is zero (both marginals concentrated on one
    class) kappa is 1 if observed agreement is perfect; otherwise it is
    undefined and ``ValueError`` is raised.
    """
    counts = np.asarray(cm.counts, dtype=np.float64)
    k = counts.shape[0]
    total = counts.sum()
    if total <= 0:
        raise ValueError("kappa needs at least one observation")
    if k < 2:
        raise ValueError("kappa needs at least two classes")
    idx = np.arange(k)
    w = np.abs(idx[:, None] - idx[None, :]) / (k - 1)
    observed = counts / total
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    obs_dis = float((w * observed).sum())
    exp_dis = float((w * expected).sum())
    if exp_dis == 0:
        if obs_dis == 0:
            return 1.0
        raise ValueError("kappa undefined: zero expected disagreement")
    return 1.0 - obs_dis / exp_dis


_BANDS = ((0.21, 0.40, "fair"), (0.41, 0.60, "moderate"), (0.61, 0.80, "substantial"))


def kappa_band(kappa: float) -> str:
    """Agreement label for the listed bands; values are compared at two decimals."""
    v = round(float(kappa), 2)
    for lo, hi, label in _BANDS:
        if lo <= v <= hi:
            return label
    return "unclassified"


def group_average_predictions(probs, group_ids) -> dict:
    """Average probability rows per group and take the argmax (ties go to the lower class)."""
    probs = np.asarray(probs, dtype=np.float64)
    groups = np.asarray(group_ids)
    if probs.ndim != 2 or probs.shape[0] != groups.shape[0]:
        raise ValueError("one probability row per group id required")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-5):
        raise ValueError("probability rows must sum to 1")
    out = {}
    for g in dict.fromkeys(groups.tolist()):
        rows = probs[groups == g]
        out[g] = int(np.argmax(rows.mean(axis=0)))  # argmax returns the first maximum
    return out


# ---------------------------------------------------------------------------
# variance probes

@dataclass
class ChannelVariance:
    layer: str
    channel: int
    mode: str
    measured_var: float
    theory_var: float
    input_var: float
    matched: bool


@dataclass
class VarianceProbeReport:
    rows: list[ChannelVariance] = field(default_factory=list)
    batch_size: int = 0
    provenance: str = ""

    HEADER = ("layer", "channel", "mode", "measured_var", "theory_var")

    def layers(self) -> list[str]:
        return list(dict.fromkeys(r.layer for r in self.rows))

    def layer_mean(self, layer: str) -> float:
        return float(np.mean([r.measured_var for r in self.rows if r.layer == layer]))

    def ratios(self) -> np.ndarray:
        return np.array([r.measured_var / r.theory_var if r.theory_var > 0 else np.nan
                         for r in self.rows])

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.HEADER)
        for r in self.rows:
            writer.writerow([r.layer, r.channel, r.mode, repr(r.measured_var), repr(r.theory_var)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def _channel_var(x: np.ndarray) -> np.ndarray:
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    return x.astype(np.float64).var(axis=axes)


def bn_variance_probe(network: Network, probe_batch, min_batch: int = 8,
                      match_tolerance: float = 0.2, provenance: str = "") -> VarianceProbeReport:
    """Per-channel output variance of every BN layer in the infer phase.

    The theoretical value is ``gamma^2`` for channels whose stored statistics
    match the probe input (input variance within ``match_tolerance`` of the
    stored variance), and ``gamma^2 * Var(x) / (sigma^2 + eps)`` otherwise.
    """
    x = np.asarray(probe_batch, dtype=np.float32)
    if x.shape[0] < min_batch:
        raise ValueError(f"probe batch of {x.shape[0]} is below the floor of {min_batch}")
    report = VarianceProbeReport(batch_size=int(x.shape[0]), provenance=provenance)
    with T.no_grad():
        for i, layer, inp, out in network.activations(x, INFER):
            if not isinstance(layer, BatchNorm):
                continue
            in_var = _channel_var(inp.data)
            out_var = _channel_var(out.data)
            g2 = layer.gamma.data.astype(np.float64) ** 2
            stored = layer.running_var.astype(np.float64) + layer.eps
            for c in range(layer.num_features):
                matched = abs(in_var[c] / stored[c] - 1.0) <= match_tolerance
                theory = g2[c] if matched else g2[c] * in_var[c] / stored[c]
                report.rows.append(ChannelVariance(
                    f"{i}.bn", c, layer.mode.value, float(out_var[c]), float(theory),
                    float(in_var[c]), bool(matched)))
    return report


def stacked_bn_probe_network(width: int, depth: int, frozen_var: float,
                             gamma: float = 1.0, seed: int = 0) -> Network:
    """``depth`` blocks of [orthogonal Linear, BN(frozen mean 0, var frozen_var)].

    With unit-variance zero-mean input, each block multiplies channel variance
    by ``gamma^2 / (frozen_var + eps)``; ``frozen_var = 1`` and ``gamma = 1``
    keeps it at 1 throughout.
    """
    from .nn import Linear  # local to keep the module surface small

    rng = np.random.default_rng(seed)
    layers = []
    for _ in range(depth):
        lin = Linear(width, width)
        q, _r = np.linalg.qr(rng.standard_normal((width, width)))
        lin.weight.data = q.astype(T.DTYPE)
        bn = BatchNorm(width, mode=StatsMode.FROZEN_EXTERNAL)
        bn.running_var = np.full(width, frozen_var, dtype=T.DTYPE)
        bn.gamma.data = np.full(width, gamma, dtype=T.DTYPE)
        layers += [lin, bn]
    return Network(layers)


# ---------------------------------------------------------------------------
# feature export

@dataclass
class FeatureDump:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.features.shape[0])


def penultimate_features(network: Network, images, batch_size: int = 1024) -> np.ndarray:
    if len(network.layers) < 2:
        raise ValueError("feature export needs a network with at least 2 layers")
    images = np.asarray(images)
    chunks = []
    with T.no_grad():
        for start in range(0, images.shape[0], batch_size):
            out = T.as_tensor(images[start:start + batch_size])
            for layer in network.layers[:-1]:
                out = layer.forward(out, INFER)
            chunks.append(out.data.reshape(out.shape[0], -1))
    return np.concatenate(chunks)


def export_penultimate_features(network: Network, dataset, path) -> FeatureDump:
    """Write ``label,f0,f1,...`` rows in dataset order."""
    feats = penultimate_features(network, dataset.images)
    dump = FeatureDump(feats, np.asarray(dataset.labels))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label"] + [f"f{j}" for j in range(feats.shape[1])])
        for lab, row in zip(dump.labels, feats):
            writer.writerow([int(lab)] + [repr(float(v)) for v in row])
    return dump
