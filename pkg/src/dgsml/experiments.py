"""Sweep execution: (rate, seed, target) runs, metrics CSV rows and summary statistics."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .domains import (
    ConfigurationError,
    DomainCollection,
    generate_rotated_moons,
    generate_shifted_gaussians,
    leave_one_domain_out,
    mask_labels,
    read_collection,
)
from .model import ModelConfig, accuracy
from .trainer import DivergenceError, HyperParams, deepall_train, train

SCHEMA_VERSION = 1
METRICS_COLUMNS = ["schema_version", "method", "target", "rate", "seed", "accuracy", "l_task", "l_sl", "l_align", "status"]
TIMING_COLUMNS = ["method", "target", "rate", "seed", "wall_ms"]

# method name -> overrides applied to the base hyperparameters
VARIANTS: dict[str, dict] = {
    "dgsml": {},
    "dgsml-no-sl": {"beta0": 0.0},
    "dgsml-no-align": {"beta1": 0.0},
    "dgsml-neither": {"beta0": 0.0, "beta1": 0.0},
    "dgsml-first-order": {"second_order": False},
}
ABLATION_VARIANTS = list(VARIANTS)
METHODS = ["deepall", *VARIANTS]


@dataclass
class DatasetSpec:
    generator: str = "moons"
    n_domains: int = 4
    samples_per_domain: int = 200
    rotations: list[float] = field(default_factory=lambda: [0.0, 30.0, 60.0, 90.0])
    noise_sd: float = 0.1
    seed: int = 0
    num_classes: int = 3
    class_separation: float = 2.0
    translations: list[float] | None = None
    input_dim: int = 2
    path: str | None = None

    def build(self) -> DomainCollection:
        if self.path:
            return read_collection(self.path)
        if self.generator == "moons":
            return generate_rotated_moons(self.n_domains, self.samples_per_domain, self.rotations, self.noise_sd, self.seed)
        if self.generator == "gaussians":
            return generate_shifted_gaussians(
                self.n_domains,
                self.num_classes,
                self.samples_per_domain,
                self.class_separation,
                self.translations,
                self.noise_sd,
                self.seed,
                self.input_dim,
            )
        raise ConfigurationError(f"unknown generator {self.generator!r}")


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    hidden_dims: list[int] = field(default_factory=lambda: [32, 32])
    feature_dim: int = 16
    hyper: HyperParams = field(default_factory=HyperParams)
    rates: list[float] = field(default_factory=lambda: [0.95])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    targets: list[int] | str = "all"
    methods: list[str] = field(default_factory=lambda: ["dgsml", "deepall"])
    out_dir: str = "runs"
    jobs: int = 1

    def validate(self):
        if not self.seeds:
            raise ConfigurationError("need at least one seed")
        for r in self.rates:
            if not 0.0 <= r < 1.0:
                raise ConfigurationError(f"rate {r} outside [0, 1)")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigurationError(f"unknown method {m!r}; choose from {METHODS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        ds = DatasetSpec(**d.pop("dataset", {}))
        hp = HyperParams(**d.pop("hyper", {}))
        return cls(dataset=ds, hyper=hp, **d)


@dataclass
class MetricsRecord:
    method: str
    target: int
    rate: float
    seed: int
    accuracy: float
    l_task: float
    l_sl: float
    l_align: float
    status: str = "ok"
    wall_ms: int = 0

    @property
    def key(self) -> tuple:
        return (self.method, self.target, _fmt(self.rate), self.seed)

    def metrics_row(self) -> list[str]:
        return [
            str(SCHEMA_VERSION),
            self.method,
            str(self.target),
            _fmt(self.rate),
            str(self.seed),
            _fmt(self.accuracy),
            _fmt(self.l_task),
            _fmt(self.l_sl),
            _fmt(self.l_align),
            self.status,
        ]

    def timing_row(self) -> list[str]:
        return [self.method, str(self.target), _fmt(self.rate), str(self.seed), str(self.wall_ms)]


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


@dataclass(frozen=True)
class RunSpec:
    method: str
    target: int
    rate: float
    seed: int


def run_one(collection: DomainCollection, spec: RunSpec, hyper: HyperParams, model_config: ModelConfig) -> MetricsRecord:
    """Mask the sources with ``spec.seed``, train, evaluate on the fully labeled target."""
    t0 = time.perf_counter()
    sources, target = leave_one_domain_out(collection, spec.target)
    sources = mask_labels(sources, spec.rate, spec.seed)
    target = target.fully_labeled()
    hp = replace(hyper, seed=spec.seed)
    try:
        if spec.method == "deepall":
            params, tlog = deepall_train(sources, hp, model_config=model_config)
        else:
            params, tlog = train(sources, replace(hp, **VARIANTS[spec.method]), model_config=model_config)
    except DivergenceError:
        nan = float("nan")
        wall = int(round(1000 * (time.perf_counter() - t0)))
        return MetricsRecord(spec.method, spec.target, spec.rate, spec.seed, nan, nan, nan, nan, "failed", wall)
    acc = accuracy(params, target.x_labeled, target.y_labeled)
    last = tlog.last() if len(tlog) else {"l_task": 0.0, "l_sl": 0.0, "l_align": 0.0}
    wall = int(round(1000 * (time.perf_counter() - t0)))
    return MetricsRecord(spec.method, spec.target, spec.rate, spec.seed, acc, last["l_task"], last["l_sl"], last["l_align"], "ok", wall)


def plan_runs(config: ExperimentConfig, collection: DomainCollection, methods: Sequence[str] | None = None) -> list[RunSpec]:
    targets = collection.ids if config.targets == "all" else [int(t) for t in config.targets]
    for t in targets:
        collection.get(t)
    methods = list(methods or config.methods)
    return [RunSpec(m, t, r, s) for r in config.rates for t in targets for s in config.seeds for m in methods]


def _run_star(args):
    return run_one(*args)


def execute(
    runs: Sequence[RunSpec],
    collection: DomainCollection,
    hyper: HyperParams,
    model_config: ModelConfig,
    jobs: int = 1,
) -> Iterable[MetricsRecord]:
    """Yield records in ``runs`` order; with jobs > 1 runs execute in worker processes."""
    args = [(collection, r, hyper, model_config) for r in runs]
    if jobs <= 1 or len(runs) <= 1:
        for a in args:
            yield run_one(*a)
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        yield from pool.map(_run_star, args)


# ---------------------------------------------------------------- metrics files


class MetricsWriter:
    """Append-only metrics CSV plus a timing sidecar; the only writer of both files."""

    def __init__(self, out_dir, metrics_name: str = "metrics.csv", timing_name: str = "timings.csv"):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.metrics_path = self.out / metrics_name
        self.timing_path = self.out / timing_name
        self._ensure_header(self.metrics_path, METRICS_COLUMNS)
        self._ensure_header(self.timing_path, TIMING_COLUMNS)

    @staticmethod
    def _ensure_header(path: Path, columns: list[str]):
        if path.exists() and path.stat().st_size:
            with open(path, newline="") as fh:
                header = next(csv.reader(fh), None)
            if header != columns:
                raise ConfigurationError(f"{path} has an incompatible header {header}")
            return
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(columns)

    def completed(self) -> set[tuple]:
        return {r.key for r in read_metrics(self.metrics_path) if r.status == "ok"}

    def append(self, rec: MetricsRecord):
        with open(self.metrics_path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(rec.metrics_row())
        with open(self.timing_path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(rec.timing_row())


def read_metrics(path) -> list[MetricsRecord]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                MetricsRecord(
                    row["method"],
                    int(row["target"]),
                    float(row["rate"]),
                    int(row["seed"]),
                    float(row["accuracy"]),
                    float(row["l_task"]),
                    float(row["l_sl"]),
                    float(row["l_align"]),
                    row["status"],
                )
            )
    return out


def mean_stderr(values: Sequence[float]) -> tuple[float, float]:
    """Arithmetic mean and standard error (sample sd with n-1, over sqrt n)."""
    n = len(values)
    if n == 0:
        return float("nan"), float("nan")
    m = math.fsum(values) / n
    if n == 1:
        return m, 0.0
    var = math.fsum((v - m) ** 2 for v in values) / (n - 1)
    return m, math.sqrt(var) / math.sqrt(n)


def summarize(records: Sequence[MetricsRecord]) -> dict:
    """Mean +- standard error over seeds per (method, target, rate); plus per (method, rate) over targets."""
    groups: dict[tuple, list[MetricsRecord]] = {}
    for r in records:
        if r.status == "ok":
            groups.setdefault((r.method, r.target, _fmt(r.rate)), []).append(r)
    rows = []
    for (method, target, rate), recs in sorted(groups.items(), key=lambda kv: (kv[0][0], float(kv[0][2]), kv[0][1])):
        recs = sorted(recs, key=lambda r: r.seed)
        accs = [r.accuracy for r in recs]
        m, se = mean_stderr(accs)
        rows.append(
            {
                "method": method,
                "target": target,
                "rate": float(rate),
                "n": len(accs),
                "seeds": [r.seed for r in recs],
                "accuracies": accs,
                "mean": m,
                "stderr": se,
            }
        )
    overall: dict[tuple, list[float]] = {}
    for row in rows:
        overall.setdefault((row["method"], row["rate"]), []).append(row["mean"])
    over_rows = [
        {"method": k[0], "rate": k[1], "n_targets": len(v), "mean_over_targets": math.fsum(v) / len(v)}
        for k, v in sorted(overall.items())
    ]
    return {"schema_version": SCHEMA_VERSION, "groups": rows, "overall": over_rows}


def write_summary(records: Sequence[MetricsRecord], path) -> dict:
    summary = summarize(records)
    Path(path).write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def write_ablation_table(summary: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "target", "rate", "n", "mean", "stderr"])
        for g in summary["groups"]:
            w.writerow([g["method"], g["target"], _fmt(g["rate"]), g["n"], _fmt(g["mean"]), _fmt(g["stderr"])])


def run_sweep(config: ExperimentConfig, methods: Sequence[str] | None = None, metrics_name: str = "metrics.csv") -> tuple[list[MetricsRecord], dict]:
    """Run every planned (method, target, rate, seed) not already recorded; return all records and the summary."""
    config.validate()
    collection = config.dataset.build()
    mc = ModelConfig(collection.input_dim, tuple(config.hidden_dims), config.feature_dim, collection.num_classes)
    writer = MetricsWriter(config.out_dir, metrics_name)
    done = writer.completed()
    todo = [r for r in plan_runs(config, collection, methods) if (r.method, r.target, _fmt(r.rate), r.seed) not in done]
    for rec in execute(todo, collection, config.hyper, mc, config.jobs):
        writer.append(rec)
    records = read_metrics(writer.metrics_path)
    return records, summarize(records)


def default_out_dir() -> str:
    return os.environ.get("DGSML_OUT", "runs")
