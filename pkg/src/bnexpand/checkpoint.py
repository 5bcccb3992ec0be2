"""Binary checkpoints with a named tensor table, and BN statistics transplant.

Layout, all integers little-endian::

    magic b"BNXCKPT\\0" | u32 version
    u32 n | n bytes of JSON architecture descriptor
    u32 n | n bytes of JSON metadata
    u32 count | count directory entries:
        u16 n | name | u8 dtype code | u8 ndim | ndim x u64 dims | u64 offset
    float32 payload
    u64 blake2b-64 checksum of everything above
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .ewc import FisherDiagonal, ParameterSnapshot
from .nn import BatchNorm, Network, layer_from_descriptor

MAGIC = b"BNXCKPT\0"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}
STAT_SUFFIXES = (".running_mean", ".running_var")


class CheckpointError(ValueError):
    """Raised for malformed, truncated, corrupted, or incompatible checkpoints."""


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True).encode()


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def _readonly(arr: np.ndarray) -> np.ndarray:
    a = np.array(arr, dtype="<f4", copy=True)
    a.flags.writeable = False
    return a


def _is_stat(name: str) -> bool:
    return name.endswith(STAT_SUFFIXES) and not name.startswith(("fisher.", "snapshot."))


@dataclass(frozen=True)
class Checkpoint:
    descriptor: list
    tensors: Mapping[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        object.__setattr__(self, "tensors",
                           MappingProxyType({k: _readonly(v) for k, v in self.tensors.items()}))
        bn = [i for i, d in enumerate(self.descriptor) if d.get("kind") == "batchnorm"]
        for i in bn:
            for suffix in STAT_SUFFIXES:
                if f"{i}{suffix}" not in self.tensors:
                    raise CheckpointError(f"BN layer {i} has no {suffix[1:]} entry")
        stray = [k for k in self.tensors if _is_stat(k) and int(k.split(".")[0]) not in bn]
        if stray:
            raise CheckpointError(f"running statistics for non-BN layers: {stray}")

    # construction -----------------------------------------------------------
    @classmethod
    def from_network(cls, network: Network, metadata: dict | None = None,
                     fisher: FisherDiagonal | None = None,
                     snapshot: ParameterSnapshot | None = None) -> "Checkpoint":
        tensors = dict(network.state_dict())
        meta = dict(metadata or {})
        if fisher is not None:
            tensors.update({f"fisher.{k}": v for k, v in fisher.values.items()})
            meta["fisher_samples"] = fisher.sample_count
        if snapshot is not None:
            tensors.update({f"snapshot.{k}": v for k, v in snapshot.params.items()})
        return cls(network.describe(), tensors, meta)

    def build_network(self) -> Network:
        """Reconstruct the architecture and load every parameter and statistic."""
        net = Network([layer_from_descriptor(d) for d in self.descriptor])
        load_into(net, self)
        return net

    def fisher(self) -> FisherDiagonal | None:
        vals = {k[len("fisher."):]: v for k, v in self.tensors.items() if k.startswith("fisher.")}
        if not vals:
            return None
        return FisherDiagonal(vals, int(self.metadata.get("fisher_samples", 0)))

    def snapshot(self) -> ParameterSnapshot | None:
        vals = {k[len("snapshot."):]: v for k, v in self.tensors.items()
                if k.startswith("snapshot.")}
        return ParameterSnapshot(vals, "checkpoint") if vals else None

    def stat_names(self) -> list[str]:
        return [k for k in self.tensors if _is_stat(k)]

    # serialization ------------------------------------------------------------
    def to_bytes(self) -> bytes:
        desc = _json_bytes(self.descriptor)
        meta = _json_bytes(self.metadata)
        head = [MAGIC, struct.pack("<I", self.version),
                struct.pack("<I", len(desc)), desc, struct.pack("<I", len(meta)), meta,
                struct.pack("<I", len(self.tensors))]
        payload = []
        offset = 0
        for name, arr in self.tensors.items():
            raw = name.encode()
            head += [struct.pack("<H", len(raw)), raw,
                     struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim),
                     struct.pack(f"<{arr.ndim}Q", *arr.shape), struct.pack("<Q", offset)]
            blob = arr.tobytes()
            payload.append(blob)
            offset += len(blob)
        body = b"".join(head + payload)
        return body + _checksum(body)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < len(MAGIC) + 12:
            raise CheckpointError("checkpoint truncated")
        if data[:len(MAGIC)] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        body, digest = data[:-8], data[-8:]
        if _checksum(body) != digest:
            raise CheckpointError("checksum mismatch: checkpoint is corrupted or truncated")
        pos = len(MAGIC)

        def take(fmt: str):
            nonlocal pos
            size = struct.calcsize(fmt)
            if pos + size > len(body):
                raise CheckpointError("checkpoint truncated")
            vals = struct.unpack_from(fmt, body, pos)
            pos += size
            return vals

        def take_bytes(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(body):
                raise CheckpointError("checkpoint truncated")
            out = body[pos:pos + n]
            pos += n
            return out

        (version,) = take("<I")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} "
                                  f"(expected {FORMAT_VERSION})")
        descriptor = json.loads(take_bytes(take("<I")[0]))
        metadata = json.loads(take_bytes(take("<I")[0]))
        (count,) = take("<I")
        entries = []
        for _ in range(count):
            name = take_bytes(take("<H")[0]).decode()
            code, ndim = take("<BB")
            if code not in _DTYPES:
                raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
            shape = take(f"<{ndim}Q")
            (offset,) = take("<Q")
            entries.append((name, _DTYPES[code], shape, offset))
        base = pos
        tensors = {}
        for name, dtype, shape, offset in entries:
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            start = base + offset
            if start + nbytes > len(body):
                raise CheckpointError(f"tensor {name!r}: payload truncated")
            tensors[name] = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize,
                                          offset=start).reshape(shape)
        return cls(descriptor, tensors, metadata, version)


def save_checkpoint(network_or_ckpt, path, metadata: dict | None = None,
                    fisher: FisherDiagonal | None = None,
                    snapshot: ParameterSnapshot | None = None) -> Checkpoint:
    """Write a network (or an existing checkpoint) to ``path`` and return what was written."""
    if isinstance(network_or_ckpt, Checkpoint):
        ckpt = network_or_ckpt
        if metadata:
            ckpt = Checkpoint(ckpt.descriptor, ckpt.tensors, {**ckpt.metadata, **metadata})
    else:
        ckpt = Checkpoint.from_network(network_or_ckpt, metadata, fisher, snapshot)
    Path(path).write_bytes(ckpt.to_bytes())
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def load_network(path) -> Network:
    return load_checkpoint(path).build_network()


def load_into(network: Network, ckpt: Checkpoint) -> None:
    """Load a checkpoint into an existing network, naming the first incompatible tensor."""
    table = ckpt.tensors
    expected = {**{n: p.shape for n, p in network.named_parameters().items()},
                **{n: b.shape for n, b in network.named_buffers().items()}}
    for name, shape in expected.items():
        if name not in table:
            raise CheckpointError(f"checkpoint has no tensor {name!r}")
        if tuple(table[name].shape) != tuple(shape):
            raise CheckpointError(f"shape mismatch for tensor {name!r}: network expects "
                                  f"{tuple(shape)}, checkpoint has {tuple(table[name].shape)}")
    network.load_state_dict({n: table[n] for n in expected})


def _bn_signature(ckpt: Checkpoint) -> list[tuple[int, int]]:
    return [(i, int(d["num_features"])) for i, d in enumerate(ckpt.descriptor)
            if d.get("kind") == "batchnorm"]


def bn_stats_transplant(dst: Checkpoint, src: Checkpoint) -> Checkpoint:
    """``dst`` with every BN running statistic replaced by ``src``'s.

    All other tensors are kept as they are.  The transplant is noted in the
    metadata only when at least one statistic actually changes, which keeps
    a self-transplant (and any repeated transplant) byte-identical.
    """
    if _bn_signature(dst) != _bn_signature(src):
        raise CheckpointError(f"BN structure mismatch: destination {_bn_signature(dst)}, "
                              f"source {_bn_signature(src)}")
    tensors = dict(dst.tensors)
    changed = []
    for name in dst.stat_names():
        new = src.tensors[name]
        if new.tobytes() != tensors[name].tobytes():
            changed.append(name)
        tensors[name] = new
    if not changed:
        return dst
    meta = dict(dst.metadata)
    history = list(meta.get("transplants", []))
    history.append({"source_checksum": _checksum(src.to_bytes()).hex(),
                    "changed": len(changed)})
    meta["transplants"] = history
    return Checkpoint(dst.descriptor, tensors, meta, dst.version)


def config_hash(obj) -> str:
    """Short stable hash of a JSON-serializable configuration."""
    return hashlib.blake2b(_json_bytes(obj), digest_size=8).hexdigest()


__all__ = ["MAGIC", "FORMAT_VERSION", "Checkpoint", "CheckpointError", "save_checkpoint",
           "load_checkpoint", "load_network", "load_into", "bn_stats_transplant", "config_hash"]
