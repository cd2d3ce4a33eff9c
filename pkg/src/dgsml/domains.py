"""Synthetic multi-domain datasets, label masking, leave-one-domain-out splits, CSV I/O."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

UNLABELED = -1
DATASET_FILE = "dataset.csv"
MANIFEST_FILE = "manifest.json"
DIAGNOSTICS_FILE = "diagnostics.csv"


class ConfigurationError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class DomainDataset:
    domain_id: int
    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray
    # true labels of x_unlabeled, kept for auditing only; training never reads them
    y_hidden: np.ndarray | None = None

    def __post_init__(self):
        d = self.x_labeled.shape[1] if self.x_labeled.ndim == 2 else self.x_unlabeled.shape[1]
        object.__setattr__(self, "x_labeled", np.asarray(self.x_labeled, dtype=np.float64).reshape(-1, d))
        object.__setattr__(self, "x_unlabeled", np.asarray(self.x_unlabeled, dtype=np.float64).reshape(-1, d))
        object.__setattr__(self, "y_labeled", np.asarray(self.y_labeled, dtype=np.int64).reshape(-1))
        if self.y_hidden is not None:
            object.__setattr__(self, "y_hidden", np.asarray(self.y_hidden, dtype=np.int64).reshape(-1))
        if len(self.x_labeled) != len(self.y_labeled):
            raise ConfigurationError("labeled features and labels differ in length")

    @property
    def n_labeled(self) -> int:
        return len(self.y_labeled)

    @property
    def n_unlabeled(self) -> int:
        return len(self.x_unlabeled)

    @property
    def input_dim(self) -> int:
        return self.x_labeled.shape[1]

    def all_x(self) -> np.ndarray:
        return np.concatenate([self.x_labeled, self.x_unlabeled])

    def all_true_labels(self) -> np.ndarray:
        """Labels for every sample; only valid when hidden labels are known."""
        if self.n_unlabeled and self.y_hidden is None:
            raise ConfigurationError(f"domain {self.domain_id}: true labels of unlabeled rows unknown")
        hidden = self.y_hidden if self.y_hidden is not None else np.zeros(0, np.int64)
        return np.concatenate([self.y_labeled, hidden])

    def fully_labeled(self) -> "DomainDataset":
        """Evaluation view: masked samples get their true labels back."""
        return DomainDataset(self.domain_id, self.all_x(), self.all_true_labels(), np.zeros((0, self.input_dim)))

    def equals(self, other: "DomainDataset") -> bool:
        same_hidden = (self.y_hidden is None and other.y_hidden is None) or (
            self.y_hidden is not None
            and other.y_hidden is not None
            and np.array_equal(self.y_hidden, other.y_hidden)
        )
        return (
            self.domain_id == other.domain_id
            and np.array_equal(self.x_labeled, other.x_labeled)
            and np.array_equal(self.y_labeled, other.y_labeled)
            and np.array_equal(self.x_unlabeled, other.x_unlabeled)
            and same_hidden
        )


@dataclass(frozen=True)
class DomainCollection:
    domains: tuple[DomainDataset, ...]
    num_classes: int
    input_dim: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        for d in self.domains:
            if d.input_dim != self.input_dim:
                raise ConfigurationError(f"domain {d.domain_id} has input dim {d.input_dim}")
        ids = self.ids
        if len(set(ids)) != len(ids):
            raise ConfigurationError("duplicate domain ids")

    @property
    def ids(self) -> list[int]:
        return [d.domain_id for d in self.domains]

    def __len__(self) -> int:
        return len(self.domains)

    def __iter__(self):
        return iter(self.domains)

    def get(self, domain_id: int) -> DomainDataset:
        for d in self.domains:
            if d.domain_id == domain_id:
                return d
        raise ConfigurationError(f"unknown domain id {domain_id}")

    def equals(self, other: "DomainCollection") -> bool:
        return (
            self.num_classes == other.num_classes
            and self.input_dim == other.input_dim
            and len(self) == len(other)
            and all(a.equals(b) for a, b in zip(self.domains, other.domains))
        )


def _domain_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _check_sizes(n_domains: int, num_classes: int, samples_per_domain: int):
    if n_domains < 2:
        raise ConfigurationError("need at least 2 domains")
    if num_classes < 2:
        raise ConfigurationError("need at least 2 classes")
    if samples_per_domain < 2 * num_classes or samples_per_domain % num_classes:
        raise ConfigurationError(
            f"samples per domain must be a multiple of {num_classes} and at least {2 * num_classes}"
        )


def _rotation(degrees: float) -> np.ndarray:
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s], [s, c]])


def _finish(rng: np.random.Generator, x: np.ndarray, y: np.ndarray, domain_id: int) -> DomainDataset:
    order = rng.permutation(len(y))
    return DomainDataset(domain_id, x[order], y[order], np.zeros((0, x.shape[1])))


def generate_rotated_moons(
    n_domains: int = 4,
    samples_per_domain: int = 200,
    rotations: Sequence[float] | None = None,
    noise_sd: float = 0.1,
    seed: int = 0,
) -> DomainCollection:
    """Two interleaving half-circles, centred at the origin, rotated per domain."""
    rotations = list(rotations) if rotations is not None else [30.0 * i for i in range(n_domains)]
    if len(rotations) != n_domains:
        raise ConfigurationError("need one rotation per domain")
    _check_sizes(n_domains, 2, samples_per_domain)
    if noise_sd < 0:
        raise ConfigurationError("noise_sd must be >= 0")
    half = samples_per_domain // 2
    domains = []
    for i, (rng, angle) in enumerate(zip(_domain_rngs(seed, n_domains), rotations)):
        t = rng.uniform(0.0, math.pi, size=(2, half))
        upper = np.stack([np.cos(t[0]), np.sin(t[0])], axis=1)
        lower = np.stack([1.0 - np.cos(t[1]), 0.5 - np.sin(t[1])], axis=1)
        x = np.concatenate([upper, lower]) - np.array([0.5, 0.25])
        x = x + noise_sd * rng.standard_normal(x.shape)
        x = x @ _rotation(angle).T
        y = np.repeat([0, 1], half)
        domains.append(_finish(rng, x, y, i))
    meta = {
        "generator": "moons",
        "n_domains": n_domains,
        "samples_per_domain": samples_per_domain,
        "rotations": [float(r) for r in rotations],
        "noise_sd": float(noise_sd),
        "seed": int(seed),
    }
    return DomainCollection(domains, 2, 2, meta)


def class_centers(num_classes: int, input_dim: int, separation: float) -> np.ndarray:
    """Classes on a regular polygon in the first two coordinates (a line when input_dim == 1)."""
    centers = np.zeros((num_classes, input_dim))
    if input_dim == 1:
        centers[:, 0] = separation * (np.arange(num_classes) - (num_classes - 1) / 2)
        return centers
    angles = 2 * math.pi * np.arange(num_classes) / num_classes
    centers[:, 0] = separation * np.cos(angles)
    centers[:, 1] = separation * np.sin(angles)
    return centers


def generate_shifted_gaussians(
    n_domains: int = 4,
    num_classes: int = 3,
    samples_per_domain: int = 150,
    class_separation: float = 2.0,
    translations: Sequence[float] | None = None,
    noise_sd: float = 0.5,
    seed: int = 0,
    input_dim: int = 2,
) -> DomainCollection:
    """Isotropic Gaussian classes; each domain translated along the unit diagonal."""
    translations = list(translations) if translations is not None else [float(i) for i in range(n_domains)]
    if len(translations) != n_domains:
        raise ConfigurationError("need one translation per domain")
    _check_sizes(n_domains, num_classes, samples_per_domain)
    if input_dim < 1 or noise_sd < 0:
        raise ConfigurationError("input_dim must be >= 1 and noise_sd >= 0")
    per_class = samples_per_domain // num_classes
    centers = class_centers(num_classes, input_dim, class_separation)
    direction = np.ones(input_dim) / math.sqrt(input_dim)
    domains = []
    for i, (rng, shift) in enumerate(zip(_domain_rngs(seed, n_domains), translations)):
        y = np.repeat(np.arange(num_classes), per_class)
        x = centers[y] + shift * direction + noise_sd * rng.standard_normal((len(y), input_dim))
        domains.append(_finish(rng, x, y, i))
    meta = {
        "generator": "gaussians",
        "n_domains": n_domains,
        "samples_per_domain": samples_per_domain,
        "class_separation": float(class_separation),
        "translations": [float(t) for t in translations],
        "noise_sd": float(noise_sd),
        "seed": int(seed),
        "input_dim": input_dim,
    }
    return DomainCollection(domains, num_classes, input_dim, meta)


# ---------------------------------------------------------------------- masking

_MASK_ATTEMPTS = 1000


def _mask_domain(dom: DomainDataset, rate: float, num_classes: int, rng: np.random.Generator) -> DomainDataset:
    m = dom.n_labeled
    k = math.floor(rate * m + 1e-9)
    if k == 0:
        return dom
    classes = np.unique(dom.y_labeled)
    if m - k < len(classes):
        raise ConfigurationError(
            f"domain {dom.domain_id}: masking {k} of {m} labels cannot keep every class labeled"
        )
    for _ in range(_MASK_ATTEMPTS):
        chosen = np.sort(rng.choice(m, size=k, replace=False))
        keep = np.ones(m, bool)
        keep[chosen] = False
        if np.array_equal(np.unique(dom.y_labeled[keep]), classes):
            break
    else:
        raise ConfigurationError(f"domain {dom.domain_id}: no mask keeps every class labeled")
    hidden_prev = dom.y_hidden if dom.y_hidden is not None else np.zeros(0, np.int64)
    if dom.n_unlabeled and dom.y_hidden is None:
        hidden = None
    else:
        hidden = np.concatenate([hidden_prev, dom.y_labeled[chosen]])
    return DomainDataset(
        dom.domain_id,
        dom.x_labeled[keep],
        dom.y_labeled[keep],
        np.concatenate([dom.x_unlabeled, dom.x_labeled[chosen]]),
        hidden,
    )


def mask_labels(collection: DomainCollection, rate: float, seed: int) -> DomainCollection:
    """Withhold floor(rate * M_L) labels per domain, chosen uniformly.

    Every class that had a labeled sample keeps at least one.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return collection
    # keyed by domain id so a domain's mask does not depend on which others are present
    masked = [
        _mask_domain(d, rate, collection.num_classes, np.random.default_rng([seed, d.domain_id]))
        for d in collection
    ]
    meta = dict(collection.metadata, mask_rate=float(rate), mask_seed=int(seed))
    return replace(collection, domains=tuple(masked), metadata=meta)


def leave_one_domain_out(collection: DomainCollection, target_id: int) -> tuple[DomainCollection, DomainDataset]:
    target = collection.get(target_id)
    sources = tuple(d for d in collection if d.domain_id != target_id)
    meta = dict(collection.metadata, target=int(target_id))
    return replace(collection, domains=sources, metadata=meta), target


# ------------------------------------------------------------------------ files


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_csv(collection: DomainCollection, path) -> None:
    """Header ``domain,label,f0,...``; labeled rows then unlabeled rows (label -1) per domain."""
    k = collection.input_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain", "label"] + [f"f{i}" for i in range(k)])
        for d in collection:
            for x, y in zip(d.x_labeled, d.y_labeled):
                w.writerow([d.domain_id, int(y)] + [_fmt(v) for v in x])
            for x in d.x_unlabeled:
                w.writerow([d.domain_id, UNLABELED] + [_fmt(v) for v in x])


def read_csv(path, num_classes: int | None = None, metadata: dict | None = None) -> DomainCollection:
    rows: dict[int, tuple[list, list, list]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        if len(header) < 3:
            raise ParseError("header needs domain, label and at least one feature column", 1)
        expected = ["domain", "label"] + [f"f{i}" for i in range(len(header) - 2)]
        for got, want in zip(header, expected):
            if got.strip() != want:
                raise ParseError(f"unexpected column {got!r} (expected {want!r})", 1)
        k = len(header) - 2
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != k + 2:
                raise ParseError(f"expected {k + 2} fields, got {len(row)}", lineno)
            try:
                dom, label = int(row[0]), int(row[1])
                x = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if not all(math.isfinite(v) for v in x):
                raise ParseError("non-finite feature value", lineno)
            if label < UNLABELED:
                raise ParseError(f"invalid label {label}", lineno)
            xl, yl, xu = rows.setdefault(dom, ([], [], []))
            if label == UNLABELED:
                xu.append(x)
            else:
                xl.append(x)
                yl.append(label)
    if num_classes is None:
        labels = [y for _, yl, _ in rows.values() for y in yl]
        num_classes = max(labels) + 1 if labels else 2
    domains = [
        DomainDataset(dom, np.array(xl).reshape(-1, k), np.array(yl, dtype=np.int64), np.array(xu).reshape(-1, k))
        for dom, (xl, yl, xu) in rows.items()
    ]
    return DomainCollection(domains, num_classes, k, dict(metadata or {}))


def write_collection(collection: DomainCollection, directory) -> list[Path]:
    """Dataset CSV, JSON manifest, and a diagnostics CSV of hidden true labels."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(collection, out / DATASET_FILE)
    manifest = dict(collection.metadata, num_classes=collection.num_classes, input_dim=collection.input_dim)
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    with open(out / DIAGNOSTICS_FILE, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain", "index", "true_label"])
        for d in collection:
            if d.y_hidden is not None:
                for i, y in enumerate(d.y_hidden):
                    w.writerow([d.domain_id, i, int(y)])
    return [out / DATASET_FILE, out / MANIFEST_FILE, out / DIAGNOSTICS_FILE]


def read_collection(directory, with_diagnostics: bool = True) -> DomainCollection:
    """Read a directory written by write_collection (manifest and diagnostics optional)."""
    src = Path(directory)
    manifest = {}
    if (src / MANIFEST_FILE).exists():
        manifest = json.loads((src / MANIFEST_FILE).read_text())
    meta = {k: v for k, v in manifest.items() if k not in ("num_classes", "input_dim")}
    coll = read_csv(src / DATASET_FILE, manifest.get("num_classes"), meta)
    diag = src / DIAGNOSTICS_FILE
    if not with_diagnostics or not diag.exists():
        return coll
    hidden: dict[int, dict[int, int]] = {}
    with open(diag, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                hidden.setdefault(int(row["domain"]), {})[int(row["index"])] = int(row["true_label"])
            except (KeyError, TypeError, ValueError):
                raise ParseError("malformed diagnostics row", lineno) from None
    domains = []
    for d in coll:
        h = hidden.get(d.domain_id)
        if h is not None and len(h) == d.n_unlabeled:
            d = replace(d, y_hidden=np.array([h[i] for i in range(d.n_unlabeled)], dtype=np.int64))
        domains.append(d)
    return replace(coll, domains=tuple(domains))
