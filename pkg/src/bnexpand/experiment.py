"""Config-driven runner for the origin/target fine-tuning matrix and lambda sweeps."""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .checkpoint import Checkpoint, config_hash, load_checkpoint, save_checkpoint
from .data import (LabeledDataset, SplitSpec, SyntheticDomainSpec, concatenate,
                   load_bundled_mnist, load_mnist_idx, make_permuted_task,
                   make_synthetic_domain_pair, split)
from .ewc import (DEFAULT_LAMBDA_GRID, EwcConfig, compute_fisher_diagonal, mean_abs_drift,
                  snapshot_parameters)
from .metrics import bn_variance_probe, kappa_band
from .nn import Network, cnn_bn, mlp_bn
from .training import FinetuneMode, StatsSource, TrainConfig, evaluate, finetune, fit

logger = logging.getLogger(__name__)

REPORT_HEADER = ("experiment", "cell", "mode", "stats_source", "lambda", "dataset",
                 "accuracy", "kappa", "band", "runtime_s")
SWEEP_HEADER = ("lambda", "dataset", "accuracy", "kappa")


@dataclass(frozen=True)
class CellSpec:
    mode: FinetuneMode
    stats_source: StatsSource
    ewc: bool = False
    combined: bool = False


# i: origin only; ii: naive fine-tune; iii: pooled upper baseline; iv-ix: the
# BN-only and all-layer variants with and without frozen origin statistics and EWC.
CELLS: dict[str, CellSpec] = {
    "i": CellSpec(FinetuneMode.SCRATCH, StatsSource.SELF_LIVE),
    "ii": CellSpec(FinetuneMode.ALL_LAYERS, StatsSource.SELF_LIVE),
    "iii": CellSpec(FinetuneMode.SCRATCH, StatsSource.SELF_LIVE, combined=True),
    "iv": CellSpec(FinetuneMode.BN_ONLY, StatsSource.SELF_LIVE),
    "v": CellSpec(FinetuneMode.BN_ONLY, StatsSource.FROZEN_ORIGIN),
    "vi": CellSpec(FinetuneMode.BN_ONLY, StatsSource.FROZEN_ORIGIN, ewc=True),
    "vii": CellSpec(FinetuneMode.ALL_LAYERS, StatsSource.FROZEN_ORIGIN),
    "viii": CellSpec(FinetuneMode.ALL_LAYERS, StatsSource.FROZEN_ORIGIN, ewc=True),
    "ix": CellSpec(FinetuneMode.ALL_LAYERS, StatsSource.SELF_LIVE, ewc=True),
}
SWEEP_CELLS = {"all_layers": "viii", "bn_only": "vi"}

# ---------------------------------------------------------------------------
# configuration

_PHASE = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "batch_size": {"type": "integer", "minimum": 2},
        "max_epochs": {"type": "integer", "minimum": 1},
        "patience": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "adam_eps": {"type": "number", "exclusiveMinimum": 0},
        "augment": {"type": "boolean"},
    },
}
_DOMAIN = {
    "type": "object",
    "additionalProperties": False,
    "required": ["gain", "offset"],
    "properties": {
        "gain": {"type": "number"},
        "offset": {"type": "number"},
        "noise_sigma": {"type": "number", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
    },
}
CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["task", "architecture", "hidden"],
    "properties": {
        "experiment": {"type": "string", "minLength": 1},
        "task": {"enum": ["permuted-mnist", "synthetic-domain"]},
        "architecture": {"enum": ["mlp-bn", "cnn-bn"]},
        "hidden": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
        "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "lambda_grid": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0}},
        "cells": {"type": "array", "items": {"enum": list(CELLS)}},
        "sweep_mode": {"enum": list(SWEEP_CELLS)},
        "swap_roles": {"type": "boolean"},
        "fisher_samples": {"type": "integer", "minimum": 1},
        "probe_batch": {"type": "integer", "minimum": 8},
        "phase1": _PHASE,
        "phase2": _PHASE,
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "permutation_seed": {"type": "integer", "minimum": 1},
                "images": {"type": "string"},
                "labels": {"type": "string"},
                "limit": {"type": "integer", "minimum": 10},
                "n_per_class": {"type": "integer", "minimum": 1},
                "class_count": {"type": "integer", "minimum": 2},
                "image_size": {"type": "integer", "minimum": 8},
                "seed": {"type": "integer", "minimum": 0},
                "origin": _DOMAIN,
                "target": _DOMAIN,
            },
        },
    },
}

_MNIST_KEYS = {"permutation_seed", "images", "labels", "limit"}
_SYNTH_KEYS = {"n_per_class", "class_count", "image_size", "seed", "origin", "target"}


@dataclass
class ExperimentConfig:
    task: str
    architecture: str
    hidden: list[int]
    experiment: str = "experiment"
    dropout: float = 0.0
    seed: int = 0
    output_dir: str = "runs"
    lambda_grid: list[float] = field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    cells: list[str] = field(default_factory=lambda: list(CELLS))
    sweep_mode: str = "all_layers"
    swap_roles: bool = False
    fisher_samples: int = 2048
    probe_batch: int = 64
    phase1: dict = field(default_factory=dict)
    phase2: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        try:
            jsonschema.validate(raw, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ValueError(f"invalid experiment config at {where}: {exc.message}") from None
        data = raw.get("data", {})
        allowed = _MNIST_KEYS if raw["task"] == "permuted-mnist" else _SYNTH_KEYS
        stray = sorted(set(data) - allowed)
        if stray:
            raise ValueError(f"data keys {stray} do not apply to task {raw['task']!r}")
        if ("images" in data) != ("labels" in data):
            raise ValueError("data.images and data.labels must be given together")
        return cls(**copy.deepcopy(raw))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in self.__dataclass_fields__}

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")  # where results go does not change them
        return config_hash(d)

    def train_config(self, phase: str, **overrides) -> TrainConfig:
        base = dict(getattr(self, phase))
        base.setdefault("seed", self.seed)
        base.update(overrides)
        return TrainConfig(**base)


# ---------------------------------------------------------------------------
# data and networks

@dataclass
class DomainSplits:
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset


def prepare_data(cfg: ExperimentConfig) -> tuple[DomainSplits, DomainSplits]:
    """Origin and target splits; roles are swapped when ``swap_roles`` is set."""
    d = cfg.data
    if cfg.task == "permuted-mnist":
        if "images" in d:
            base = load_mnist_idx(d["images"], d["labels"])
        else:
            base = load_bundled_mnist()
        if "limit" in d:
            base = base.subset(np.arange(min(d["limit"], len(base))))
        o = base
        t = make_permuted_task(base, d.get("permutation_seed", 1))
    else:
        o, t = make_synthetic_domain_pair(
            d.get("n_per_class", 400), d.get("class_count", 5), d.get("image_size", 16),
            SyntheticDomainSpec(**{"seed": 1, **d.get("origin", {"gain": 1.0, "offset": 0.0,
                                                                 "noise_sigma": 0.02})}),
            SyntheticDomainSpec(**{"seed": 2, **d.get("target", {"gain": -0.6, "offset": 0.8,
                                                                 "noise_sigma": 0.03})}),
            seed=d.get("seed", 0))
    if cfg.architecture == "mlp-bn":
        o, t = o.flat(), t.flat()
    if cfg.swap_roles:
        o, t = t, o
    spec = SplitSpec(seed=cfg.seed)
    return DomainSplits(*split(o, spec)), DomainSplits(*split(t, spec))


def build_network(cfg: ExperimentConfig, sample: LabeledDataset) -> Network:
    shape = sample.images.shape[1:]
    k = sample.class_count
    if cfg.architecture == "mlp-bn":
        return mlp_bn(int(np.prod(shape)), cfg.hidden, k, seed=cfg.seed, dropout=cfg.dropout)
    if len(shape) != 3 or shape[1] != shape[2]:
        raise ValueError(f"cnn-bn needs square C x H x W images, got {shape}")
    return cnn_bn(shape[0], shape[1], cfg.hidden, k, seed=cfg.seed, dropout=cfg.dropout)


# ---------------------------------------------------------------------------
# reports

@dataclass
class ReportRow:
    experiment: str
    cell: str
    mode: str
    stats_source: str
    lam: float | None
    dataset: str
    accuracy: float | None
    kappa: float | None
    band: str
    runtime_s: float

    def fields(self) -> list[str]:
        def num(v, fmt):
            return "" if v is None else format(v, fmt)
        return [self.experiment, self.cell, self.mode, self.stats_source,
                "" if self.lam is None else repr(float(self.lam)), self.dataset,
                num(self.accuracy, ".6f"), num(self.kappa, ".6f"), self.band,
                num(self.runtime_s, ".3f")]

    @classmethod
    def parse(cls, rec: list[str]) -> "ReportRow":
        e, c, m, s, lam, ds, acc, kap, band, rt = rec
        f = (lambda v: None if v == "" else float(v))
        return cls(e, c, m, s, f(lam), ds, f(acc), f(kap), band, f(rt) or 0.0)


def rows_to_csv(rows, header=REPORT_HEADER) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")  # RFC 4180 line endings
    writer.writerow(header)
    for r in rows:
        writer.writerow(r.fields() if isinstance(r, ReportRow) else r)
    return buf.getvalue()


def read_report(path) -> list[ReportRow]:
    with open(path, newline="") as fh:
        recs = list(csv.reader(fh))
    if not recs or tuple(recs[0]) != REPORT_HEADER:
        raise ValueError(f"{path} is not a report CSV")
    return [ReportRow.parse(r) for r in recs[1:]]


def _write_if_changed(path: Path, data: str | bytes) -> None:
    """Atomic write that leaves an identical existing file untouched."""
    raw = data.encode() if isinstance(data, str) else data
    if path.exists() and path.read_bytes() == raw:
        return
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(raw)
    os.replace(tmp, path)


@dataclass
class ExperimentReport:
    rows: list[ReportRow]
    failures: dict[str, str]
    report_path: Path

    @property
    def ok(self) -> bool:
        return not self.failures

    def metric(self, cell: str, dataset: str, lam: float | None = None) -> ReportRow:
        for r in self.rows:
            if r.cell == cell and r.dataset == dataset and r.lam == lam and r.accuracy is not None:
                return r
        raise KeyError(f"no row for cell {cell}, dataset {dataset}, lambda {lam}")


# ---------------------------------------------------------------------------
# runner

class Runner:
    """Executes matrix cells into ``output_dir/cells/<cell>``, skipping finished ones."""

    def __init__(self, cfg: ExperimentConfig, quiet: bool = True):
        self.cfg = cfg
        self.quiet = quiet
        self.out = Path(cfg.output_dir)
        self._data: tuple[DomainSplits, DomainSplits] | None = None

    @property
    def data(self) -> tuple[DomainSplits, DomainSplits]:
        if self._data is None:
            self._data = prepare_data(self.cfg)
        return self._data

    def cell_dir(self, cell: str) -> Path:
        return self.out / "cells" / cell

    def _meta(self, **extra) -> dict:
        return {"seed": self.cfg.seed, "config_hash": self.cfg.hash(), **extra}

    def _write_manifest(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        manifest = {"config": self.cfg.to_dict(), "config_hash": self.cfg.hash()}
        _write_if_changed(self.out / "manifest.json",
                          json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    # shared artifacts --------------------------------------------------------
    def origin(self) -> Checkpoint:
        path = self.cell_dir("i") / "model.ckpt"
        if not path.exists():
            self.run_cell("i")
        return load_checkpoint(path)

    def fisher_checkpoint(self) -> Checkpoint:
        path = self.out / "shared" / "fisher.ckpt"
        if path.exists():
            return load_checkpoint(path)
        origin = self.origin()
        net = origin.build_network()
        o, _ = self.data
        n = min(self.cfg.fisher_samples, len(o.train))
        fisher = compute_fisher_diagonal(net, o.train, n, seed=self.cfg.seed)
        path.parent.mkdir(parents=True, exist_ok=True)
        return save_checkpoint(net, path, self._meta(kind="fisher"), fisher=fisher,
                               snapshot=snapshot_parameters(net, "origin"))

    # cells -------------------------------------------------------------------
    def run_cell(self, cell: str) -> list[ReportRow]:
        if cell not in CELLS:
            raise ValueError(f"unknown cell {cell!r}")
        cdir = self.cell_dir(cell)
        rows_path = cdir / "rows.csv"
        if rows_path.exists():
            return read_report(rows_path)
        cdir.mkdir(parents=True, exist_ok=True)
        spec = CELLS[cell]
        lams = list(self.cfg.lambda_grid) if spec.ewc else [None]
        rows, details = [], {}
        for lam in lams:
            t0 = time.perf_counter()
            net, info = self._train(cell, spec, lam)
            runtime = time.perf_counter() - t0
            tag = "model" if lam is None else f"model_lam{lam!r}"
            save_checkpoint(net, cdir / f"{tag}.ckpt",
                            self._meta(epoch=info["best_epoch"], val_accuracy=info["val_accuracy"],
                                       cell=cell, lam=lam))
            o, t = self.data
            probe_x = o.test.images[:max(self.cfg.probe_batch, 8)]
            probe = bn_variance_probe(net, probe_x, provenance=f"{cell}:{lam}")
            probe.to_csv(cdir / ("probe.csv" if lam is None else f"probe_lam{lam!r}.csv"))
            for name, ds in (("O", o.test), ("T", t.test)):
                m = evaluate(net, ds)
                rows.append(ReportRow(self.cfg.experiment, cell, spec.mode.value,
                                      spec.stats_source.value, lam, name, m.accuracy,
                                      m.kappa, kappa_band(m.kappa), runtime))
            details["origin" if lam is None else repr(lam)] = info
        _write_if_changed(cdir / "details.json", json.dumps(details, indent=2, sort_keys=True) + "\n")
        _write_if_changed(rows_path, rows_to_csv(rows))
        return read_report(rows_path)  # fresh and resumed runs return the same values

    def _train(self, cell: str, spec: CellSpec, lam: float | None):
        o, t = self.data
        if spec.mode is FinetuneMode.SCRATCH:
            train, val = o.train, o.val
            if spec.combined:
                train = concatenate(o.train, t.train)
                val = concatenate(o.val, t.val)
            net = build_network(self.cfg, o.train)
            res = fit(net, train, val, self.cfg.train_config("phase1", quiet=self.quiet))
            return net, {"best_epoch": res.best_epoch, "stopped_epoch": res.stopped_epoch,
                         "val_accuracy": res.best_val_accuracy}
        origin = self.origin()
        tc = self.cfg.train_config("phase2", quiet=self.quiet, finetune_mode=spec.mode,
                                   stats_source=spec.stats_source,
                                   ewc=None if lam is None else EwcConfig(lam))
        fisher = self.fisher_checkpoint().fisher() if lam is not None else None
        res = finetune(origin, t.train, t.val, tc, origin_data=o.train, fisher=fisher)
        info = {"best_epoch": res.best_epoch, "stopped_epoch": res.stopped_epoch,
                "val_accuracy": res.best_val_accuracy}
        if res.snapshot is not None:
            info["mean_abs_drift"] = mean_abs_drift(res.network, res.snapshot)
        return res.network, info

    def details(self, cell: str) -> dict:
        return json.loads((self.cell_dir(cell) / "details.json").read_text())

    # top level ---------------------------------------------------------------
    def run(self, cells=None) -> ExperimentReport:
        self._write_manifest()
        wanted = list(cells if cells is not None else self.cfg.cells)
        rows, failures = [], {}
        for cell in wanted:
            try:
                rows.extend(self.run_cell(cell))
            except Exception as exc:  # recorded, remaining cells still run
                logger.exception("cell %s failed", cell)
                failures[cell] = f"{type(exc).__name__}: {exc}"
                spec = CELLS.get(cell)
                rows.append(ReportRow(self.cfg.experiment, cell,
                                      spec.mode.value if spec else "",
                                      spec.stats_source.value if spec else "", None, "",
                                      None, None, f"failed: {failures[cell]}", 0.0))
        path = self.out / "report.csv"
        _write_if_changed(path, rows_to_csv(rows))
        return ExperimentReport(rows, failures, path)

    def sweep(self) -> tuple[list[tuple[float, str, float, float]], Path]:
        cell = SWEEP_CELLS[self.cfg.sweep_mode]
        self._write_manifest()
        rows = self.run_cell(cell)
        table = sorted(((r.lam, r.dataset, r.accuracy, r.kappa) for r in rows),
                       key=lambda x: (x[0], x[1]))
        path = self.out / "sweep.csv"
        _write_if_changed(path, rows_to_csv(
            [[repr(float(l)), d, f"{a:.6f}", f"{k:.6f}"] for l, d, a, k in table],
            SWEEP_HEADER))
        return table, path


def run_experiment(config: ExperimentConfig, quiet: bool = True) -> ExperimentReport:
    return Runner(config, quiet).run()


def lambda_sweep(config: ExperimentConfig, quiet: bool = True):
    if not config.lambda_grid:
        raise ValueError("lambda grid is empty")
    return Runner(config, quiet).sweep()


__all__ = ["CELLS", "CellSpec", "CONFIG_SCHEMA", "ExperimentConfig", "DomainSplits",
           "prepare_data", "build_network", "ReportRow", "ExperimentReport", "Runner",
           "run_experiment", "lambda_sweep", "read_report", "rows_to_csv", "REPORT_HEADER",
           "SWEEP_HEADER"]
