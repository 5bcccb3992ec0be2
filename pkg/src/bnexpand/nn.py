"""Layers and a sequential network, with batch normalization statistics modes.

A :class:`BatchNorm` layer runs in one of two modes:

``StatsMode.BATCH_LIVE``
    train phase normalizes with the moments of the current batch and folds them
    into the running statistics; infer phase uses the running statistics.
``StatsMode.FROZEN_EXTERNAL``
    both phases normalize with the stored statistics, which are never written.
    gamma and beta still learn; the statistics are constants to the gradient.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

TRAIN = "train"
INFER = "infer"
_PHASES = (TRAIN, INFER)


class StatsMode(str, enum.Enum):
    BATCH_LIVE = "batch_live"
    FROZEN_EXTERNAL = "frozen_external"


def _check_phase(phase: str) -> None:
    if phase not in _PHASES:
        raise ValueError(f"phase must be one of {_PHASES}, got {phase!r}")


class Layer:
    kind = "layer"

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: Tensor, phase: str) -> Tensor:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind}

    def output_width(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape


def _he_normal(shape: Sequence[int], fan_in: int, seed: int) -> Tensor:
    return T.seeded_randn(shape, seed, math.sqrt(2.0 / fan_in), requires_grad=True)


class Linear(Layer):
    """Affine map ``x @ weight + bias`` with ``weight`` stored as in x out."""

    kind = "linear"

    def __init__(self, in_features: int, out_features: int, seed: int = 0):
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.weight = _he_normal((self.in_features, self.out_features), self.in_features, seed)
        self.bias = Tensor(np.zeros(self.out_features), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: Tensor, phase: str) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"linear expects N x {self.in_features}, got {x.shape}")
        return T.add(T.matmul(x, self.weight), self.bias)

    def describe(self) -> dict:
        return {"kind": self.kind, "in_features": self.in_features,
                "out_features": self.out_features}

    def output_width(self, in_shape):
        return (self.out_features,)


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, seed: int = 0):
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)
        self.padding = int(padding)
        fan_in = self.in_channels * self.kernel_size ** 2
        self.weight = _he_normal((self.out_channels, self.in_channels, self.kernel_size,
                                  self.kernel_size), fan_in, seed)
        self.bias = Tensor(np.zeros(self.out_channels), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: Tensor, phase: str) -> Tensor:
        return T.add(T.conv2d(x, self.weight, self.stride, self.padding), self.bias)

    def describe(self) -> dict:
        return {"kind": self.kind, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel_size": self.kernel_size,
                "stride": self.stride, "padding": self.padding}

    def output_width(self, in_shape):
        _, h, w = in_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        return (self.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)


class BatchNorm(Layer):
    """Per-channel batch normalization over N (2-d input) or N, H, W (4-d input)."""

    kind = "batchnorm"

    def __init__(self, num_features: int, momentum: float = 0.9, eps: float = 1e-5,
                 mode: StatsMode = StatsMode.BATCH_LIVE):
        self.num_features = int(num_features)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.mode = StatsMode(mode)
        self.gamma = Tensor(np.ones(self.num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(self.num_features), requires_grad=True)
        self.running_mean = np.zeros(self.num_features, dtype=T.DTYPE)
        self.running_var = np.ones(self.num_features, dtype=T.DTYPE)

    def parameters(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def describe(self) -> dict:
        return {"kind": self.kind, "num_features": self.num_features,
                "momentum": self.momentum, "eps": self.eps, "mode": self.mode.value}

    def forward(self, x: Tensor, phase: str) -> Tensor:
        _check_phase(phase)
        if x.ndim not in (2, 4) or x.shape[1] != self.num_features:
            raise ValueError(f"batchnorm over {self.num_features} channels got input {x.shape}")
        if self.mode is StatsMode.BATCH_LIVE and phase == TRAIN:
            count = x.shape[0] * (x.shape[2] * x.shape[3] if x.ndim == 4 else 1)
            if x.shape[0] < 2 or count < 2:
                raise ValueError("batch statistics need at least 2 samples per channel")
            mu, var = T.moments(x)
            self.update_running_stats(mu.data, var.data)
            denom = T.sqrt(T.add(var, self.eps))
            xhat = T.div(T.sub(x, mu), denom)
        else:
            inv = 1.0 / np.sqrt(self.running_var.astype(np.float64) + self.eps)
            xhat = T.mul(T.sub(x, Tensor(self.running_mean)), Tensor(inv))
        return T.add(T.mul(xhat, self.gamma), self.beta)

    def update_running_stats(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        """Convex update ``stat <- momentum * stat + (1 - momentum) * batch``."""
        if self.mode is not StatsMode.BATCH_LIVE:
            raise RuntimeError("running statistics are frozen in FROZEN_EXTERNAL mode")
        a = self.momentum
        bm = np.asarray(batch_mean, dtype=np.float64).reshape(-1)
        bv = np.asarray(batch_var, dtype=np.float64).reshape(-1)
        if bm.shape[0] != self.num_features or bv.shape[0] != self.num_features:
            raise ValueError("batch statistics do not match the channel count")
        # incremental form keeps a batch equal to the running value an exact fixed point;
        # new arrays, so snapshots taken earlier stay intact
        rm = self.running_mean.astype(np.float64)
        rv = self.running_var.astype(np.float64)
        self.running_mean = (rm + (1 - a) * (bm - rm)).astype(T.DTYPE)
        self.running_var = (rv + (1 - a) * (bv - rv)).astype(T.DTYPE)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x: Tensor, phase: str) -> Tensor:
        return T.relu(x)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x: Tensor, phase: str) -> Tensor:
        return T.flatten(x)

    def output_width(self, in_shape):
        return (int(np.prod(in_shape)),)


class Dropout(Layer):
    """Inverted dropout; the mask stream is keyed on (seed, forward-call counter)."""

    kind = "dropout"

    def __init__(self, p: float = 0.5, seed: int = 0):
        if not 0 <= p < 1:
            raise ValueError("dropout probability must be in [0, 1)")
        self.p = float(p)
        self.seed = int(seed)
        self.calls = 0

    def reseed(self, seed: int) -> None:
        self.seed = int(seed)
        self.calls = 0

    def describe(self) -> dict:
        return {"kind": self.kind, "p": self.p}

    def forward(self, x: Tensor, phase: str) -> Tensor:
        _check_phase(phase)
        if phase == INFER or self.p == 0:
            return x
        rng = np.random.default_rng([self.seed, self.calls])
        self.calls += 1
        keep = rng.random(x.shape) >= self.p
        return T.mul(x, Tensor(keep / (1.0 - self.p)))


_KINDS = {cls.kind: cls for cls in (Linear, Conv2d, BatchNorm, ReLU, Flatten, Dropout)}


def layer_from_descriptor(desc: dict, seed: int = 0) -> Layer:
    desc = dict(desc)
    kind = desc.pop("kind")
    if kind not in _KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    if kind in ("linear", "conv2d"):
        desc["seed"] = seed
    if kind == "batchnorm" and "mode" in desc:
        desc["mode"] = StatsMode(desc["mode"])
    return _KINDS[kind](**desc)


@dataclass
class Network:
    """Layers applied in order, with a name-keyed parameter registry and freeze mask."""

    layers: list[Layer]

    def __post_init__(self):
        self.layers = list(self.layers)
        self.trainable: dict[str, bool] = {name: True for name in self.named_parameters()}

    # registry ------------------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for pname, p in layer.parameters().items():
                out[f"{i}.{pname}"] = p
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for bname, b in layer.buffers().items():
                out[f"{i}.{bname}"] = b
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters().items() if self.trainable.get(n, True)}

    def set_trainable(self, names: Iterable[str] | None = None, value: bool = True) -> None:
        params = self.named_parameters()
        for n in (params if names is None else names):
            if n not in params:
                raise KeyError(f"no parameter named {n!r}")
            self.trainable[n] = value

    def batchnorm_layers(self) -> list[tuple[int, BatchNorm]]:
        return [(i, layer) for i, layer in enumerate(self.layers) if isinstance(layer, BatchNorm)]

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def reseed(self, seed: int) -> None:
        """Reset every dropout stream from one run seed."""
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dropout):
                layer.reseed(int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))

    def describe(self) -> list[dict]:
        return [layer.describe() for layer in self.layers]

    # state -----------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, keyed by stable names."""
        state = {n: p.data.copy() for n, p in self.named_parameters().items()}
        state.update({n: b.copy() for n, b in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        expected = set(params) | set(self.named_buffers())
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing tensors: {sorted(missing)}")
        for n, p in params.items():
            arr = np.asarray(state[n])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {n}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(T.DTYPE, copy=True)
        for i, layer in self.batchnorm_layers():
            for b in ("running_mean", "running_var"):
                arr = np.asarray(state[f"{i}.{b}"])
                if arr.shape != (layer.num_features,):
                    raise ValueError(f"shape mismatch for {i}.{b}: expected "
                                     f"{(layer.num_features,)}, got {arr.shape}")
                setattr(layer, b, arr.astype(T.DTYPE, copy=True))

    def copy(self) -> "Network":
        clone = Network([layer_from_descriptor(d) for d in self.describe()])
        clone.load_state_dict(self.state_dict())
        clone.trainable = dict(self.trainable)
        return clone

    # forward -----------------------------------------------------------------
    def forward(self, x, phase: str = INFER) -> Tensor:
        _check_phase(phase)
        out = T.as_tensor(x)
        for i, layer in enumerate(self.layers):
            try:
                out = layer.forward(out, phase)
            except ValueError as exc:
                raise ValueError(f"layer {i} ({layer.kind}): {exc}") from exc
        return out

    __call__ = forward

    def activations(self, x, phase: str = INFER) -> Iterator[tuple[int, Layer, Tensor, Tensor]]:
        """Yield ``(index, layer, input, output)`` for each layer in turn."""
        out = T.as_tensor(x)
        for i, layer in enumerate(self.layers):
            inp = out
            out = layer.forward(inp, phase)
            yield i, layer, inp, out

    def predict_proba(self, x, batch_size: int = 1024) -> np.ndarray:
        x = np.asarray(x)
        chunks = []
        with T.no_grad():
            for start in range(0, x.shape[0], batch_size):
                logits = self.forward(x[start:start + batch_size], INFER).data
                chunks.append(np.exp(T.log_softmax(logits)))
        return np.concatenate(chunks) if chunks else np.zeros((0, 0))


def network_forward(network: Network, x, phase: str = INFER) -> Tensor:
    return network.forward(x, phase)


def set_stats_source(network: Network, source=None) -> None:
    """Switch every BN layer to FROZEN_EXTERNAL using ``source``'s running statistics.

    ``source`` may be ``None`` (keep the network's own statistics), another
    :class:`Network`, a state mapping, or anything with a ``tensors`` mapping
    such as a checkpoint.  gamma and beta are left untouched.
    """
    bns = network.batchnorm_layers()
    if source is not None:
        if isinstance(source, Network):
            table = source.named_buffers()
        else:
            table = getattr(source, "tensors", source)
        src_bn = sorted({k.rsplit(".", 1)[0] for k in table if k.endswith(".running_mean")},
                        key=lambda s: int(s) if s.isdigit() else s)
        if len(src_bn) != len(bns):
            raise ValueError(f"source has {len(src_bn)} BN layers, network has {len(bns)}")
        for i, layer in bns:
            mean = np.asarray(table.get(f"{i}.running_mean"))
            var = np.asarray(table.get(f"{i}.running_var"))
            if table.get(f"{i}.running_mean") is None or mean.shape != (layer.num_features,) \
                    or var.shape != (layer.num_features,):
                raise ValueError(f"BN layer {i}: source statistics do not match "
                                 f"{layer.num_features} channels")
            layer.running_mean = mean.astype(T.DTYPE, copy=True)
            layer.running_var = var.astype(T.DTYPE, copy=True)
    for _, layer in bns:
        layer.mode = StatsMode.FROZEN_EXTERNAL


def set_live_stats(network: Network) -> None:
    for _, layer in network.batchnorm_layers():
        layer.mode = StatsMode.BATCH_LIVE


def freeze_non_bn(network: Network) -> None:
    """Mark only BN gamma/beta trainable; gradients still flow through frozen layers."""
    bn_idx = {i for i, _ in network.batchnorm_layers()}
    for name in network.named_parameters():
        network.trainable[name] = int(name.split(".", 1)[0]) in bn_idx


def mlp_bn(in_features: int, hidden: Sequence[int], classes: int, seed: int = 0,
           dropout: float = 0.0, momentum: float = 0.9, eps: float = 1e-5) -> Network:
    """``[Linear, BN, ReLU] * len(hidden)`` then an optional dropout and the output Linear."""
    layers: list[Layer] = []
    width = in_features
    ss = np.random.SeedSequence(seed)
    seeds = [int(s) for s in ss.generate_state(len(hidden) + 1)]
    for h, s in zip(hidden, seeds):
        layers += [Linear(width, h, seed=s), BatchNorm(h, momentum, eps), ReLU()]
        width = h
    if dropout > 0:
        layers.append(Dropout(dropout))
    layers.append(Linear(width, classes, seed=seeds[-1]))
    return Network(layers)


def cnn_bn(in_channels: int, image_size: int, channels: Sequence[int], classes: int,
           seed: int = 0, dropout: float = 0.0, momentum: float = 0.9,
           eps: float = 1e-5) -> Network:
    """Stride-2 4x4 conv blocks ``[Conv, BN, ReLU]``, then flatten and a linear head.

    Each block halves the spatial size, so ``image_size`` must stay even down
    the stack.
    """
    layers: list[Layer] = []
    ss = np.random.SeedSequence(seed)
    seeds = [int(s) for s in ss.generate_state(len(channels) + 1)]
    c, size = in_channels, image_size
    for out_c, s in zip(channels, seeds):
        if size % 2:
            raise ValueError(f"spatial size {size} is not divisible by 2")
        conv = Conv2d(c, out_c, 4, stride=2, padding=1, seed=s)
        layers += [conv, BatchNorm(out_c, momentum, eps), ReLU()]
        c, size = out_c, size // 2
    layers.append(Flatten())
    if dropout > 0:
        layers.append(Dropout(dropout))
    layers.append(Linear(c * size * size, classes, seed=seeds[-1]))
    return Network(layers)
