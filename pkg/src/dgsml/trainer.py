"""Episodic meta-train / meta-test training loop and the pooled DeepAll baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import engine as E
from .domains import ConfigurationError, DomainCollection, DomainDataset
from .engine import Tensor
from .losses import (
    alignment_loss,
    combined_centroids,
    cross_entropy,
    labeled_centroids,
    pseudo_label_from_logits,
    semi_supervised_loss,
)
from .model import ModelConfig, ModelParams, extract_features, head_logits, init_params, sgd_step

log = logging.getLogger(__name__)


class EpisodeError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, train_log: "TrainLog | None" = None):
        self.iteration = iteration
        self.train_log = train_log
        super().__init__(f"non-finite gradient or loss at iteration {iteration}")


@dataclass(frozen=True)
class HyperParams:
    alpha0: float = 0.05
    alpha1: float = 0.05
    beta0: float = 0.1
    beta1: float = 0.1
    batch_per_domain: int = 16
    iterations: int = 2000
    second_order: bool = True
    seed: int = 0
    eval_every: int = 100

    def __post_init__(self):
        if self.alpha0 < 0 or self.alpha1 < 0:
            raise ConfigurationError("learning rates must be non-negative")
        if self.beta0 < 0 or self.beta1 < 0:
            raise ConfigurationError("loss coefficients must be non-negative")
        if self.batch_per_domain < 1 or self.iterations < 0:
            raise ConfigurationError("batch_per_domain must be >= 1 and iterations >= 0")


class EpisodeSplit(NamedTuple):
    train_ids: tuple[int, ...]
    test_ids: tuple[int, ...]


@dataclass
class DomainBatch:
    domain_id: int
    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray


@dataclass
class TrainLog:
    l_task_tr: list[float] = field(default_factory=list)
    l_sl: list[float] = field(default_factory=list)
    l_task_ts: list[float] = field(default_factory=list)
    l_align: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)

    def record(self, l_task_tr, l_sl=0.0, l_task_ts=0.0, l_align=0.0, total=None):
        self.l_task_tr.append(float(l_task_tr))
        self.l_sl.append(float(l_sl))
        self.l_task_ts.append(float(l_task_ts))
        self.l_align.append(float(l_align))
        self.total.append(float(l_task_tr + l_sl + l_task_ts + l_align if total is None else total))

    def __len__(self) -> int:
        return len(self.total)

    def last(self) -> dict[str, float]:
        if not self.total:
            return {"l_task": float("nan"), "l_sl": float("nan"), "l_align": float("nan"), "total": float("nan")}
        return {
            "l_task": self.l_task_tr[-1] + self.l_task_ts[-1],
            "l_sl": self.l_sl[-1],
            "l_align": self.l_align[-1],
            "total": self.total[-1],
        }


class StepLosses(NamedTuple):
    task: Tensor
    aux: Tensor  # l_sl for meta-train, l_alignment for meta-test
    total: Tensor


# --------------------------------------------------------------------- episodes


def split_domains(domain_ids: Sequence[int], rng: np.random.Generator) -> EpisodeSplit:
    """One uniformly chosen domain is meta-test; the rest are meta-train."""
    ids = tuple(domain_ids)
    if len(ids) < 2:
        raise ConfigurationError("episodic training needs at least 2 source domains")
    k = int(rng.integers(len(ids)))
    return EpisodeSplit(ids[:k] + ids[k + 1 :], (ids[k],))


def sample_batch(domain: DomainDataset, size: int, rng: np.random.Generator) -> DomainBatch:
    """``size`` labeled and ``size`` unlabeled samples, with replacement.

    A domain with fewer than ``size`` unlabeled samples contributes all of them.
    """
    if domain.n_labeled == 0:
        raise EpisodeError(f"domain {domain.domain_id} has no labeled samples")
    li = rng.integers(domain.n_labeled, size=size)
    if domain.n_unlabeled >= size:
        ui = rng.integers(domain.n_unlabeled, size=size)
    else:
        ui = np.arange(domain.n_unlabeled)
    return DomainBatch(domain.domain_id, domain.x_labeled[li], domain.y_labeled[li], domain.x_unlabeled[ui])


class _Forward(NamedTuple):
    labeled_logits: Tensor  # all labeled rows, in batch order
    labeled_y: np.ndarray
    centroids: list  # per domain: (labeled-only CentroidSet, combined CentroidSet)


def _forward(params: ModelParams, batches: Sequence[DomainBatch], num_classes: int, need_labeled_only: bool):
    """One pooled pass over all rows of ``batches``; per-domain centroids come from row slices."""
    xs = [b.x_labeled for b in batches] + [b.x_unlabeled for b in batches]
    feats = extract_features(params, np.concatenate(xs))
    logits = head_logits(params, feats)
    n_lab = [len(b.y_labeled) for b in batches]
    n_unl = [len(b.x_unlabeled) for b in batches]
    total_lab = sum(n_lab)
    lab_rows = np.arange(total_lab)
    labeled_logits = E.select_rows(logits, lab_rows) if total_lab < logits.shape[0] else logits
    cents = []
    lo_l, lo_u = 0, total_lab
    for b, nl, nu in zip(batches, n_lab, n_unl):
        f_l = E.select_rows(feats, np.arange(lo_l, lo_l + nl))
        if nu:
            u_rows = np.arange(lo_u, lo_u + nu)
            pseudo = pseudo_label_from_logits(E.select_rows(feats, u_rows), E.select_rows(logits, u_rows))
        else:
            pseudo = pseudo_label_from_logits(
                Tensor(np.zeros((0, feats.shape[1]))), Tensor(np.zeros((0, num_classes)))
            )
        lab = labeled_centroids(f_l, b.y_labeled, num_classes, b.domain_id) if need_labeled_only else None
        comb = combined_centroids(f_l, b.y_labeled, pseudo, num_classes, b.domain_id)
        cents.append((lab, comb))
        lo_l += nl
        lo_u += nu
    return _Forward(labeled_logits, np.concatenate([b.y_labeled for b in batches]), cents)


def meta_train_step(
    params: ModelParams, tr_batches: Sequence[DomainBatch], hp: HyperParams, num_classes: int
) -> tuple[ModelParams, StepLosses]:
    """Cross-entropy on D_tr labeled rows + beta0 * per-domain centroid discrepancy, then one SGD step.

    The inner step is always recorded. In second-order mode the gradient
    itself is a graph node; otherwise it is a constant, which gives the
    first-order approximation (d theta' / d theta = I).
    """
    for b in tr_batches:
        if len(b.y_labeled) == 0:
            raise EpisodeError(f"meta-train batch of domain {b.domain_id} has no labeled samples")
    with E.grad_mode(E.grad_enabled() and hp.beta0 > 0):
        fw = _forward(params, tr_batches, num_classes, need_labeled_only=True)
        l_sl = Tensor(0.0)
        for lab, comb in fw.centroids:
            l_sl = E.add(l_sl, semi_supervised_loss(lab, comb))
    if hp.beta0 == 0:
        # forward above ran without a graph; redo the task part with one
        fw_logits = head_logits(params, extract_features(params, np.concatenate([b.x_labeled for b in tr_batches])))
        l_task = cross_entropy(fw_logits, fw.labeled_y)
        total = l_task
    else:
        l_task = cross_entropy(fw.labeled_logits, fw.labeled_y)
        total = E.add(l_task, E.scalar_mul(l_sl, hp.beta0))
    grads = E.grad(total, params.tensors(), create_graph=hp.second_order)
    inner = sgd_step(params, grads, hp.alpha0, track=True)
    return inner, StepLosses(l_task, l_sl, total)


def meta_test_step(
    inner: ModelParams,
    tr_batches: Sequence[DomainBatch],
    ts_batches: Sequence[DomainBatch],
    hp: HyperParams,
    num_classes: int,
) -> StepLosses:
    """Cross-entropy on D_ts labeled rows at the inner params + beta1 * alignment.

    Centroids of both D_tr and D_ts domains are recomputed at the inner params
    (labeled + weighted pseudo-labeled variant).
    """
    for b in ts_batches:
        if len(b.y_labeled) == 0:
            raise EpisodeError(f"meta-test batch of domain {b.domain_id} has no labeled samples")
    with E.grad_mode(E.grad_enabled() and hp.beta1 > 0):
        fw = _forward(inner, list(ts_batches) + list(tr_batches), num_classes, need_labeled_only=False)
        n_ts = len(ts_batches)
        ts_sets = [comb for _, comb in fw.centroids[:n_ts]]
        tr_sets = [comb for _, comb in fw.centroids[n_ts:]]
        l_align = alignment_loss(tr_sets, ts_sets)
    n_ts_lab = sum(len(b.y_labeled) for b in ts_batches)
    y_ts = fw.labeled_y[:n_ts_lab]
    if hp.beta1 == 0:
        ts_logits = head_logits(inner, extract_features(inner, np.concatenate([b.x_labeled for b in ts_batches])))
        l_task = cross_entropy(ts_logits, y_ts)
        return StepLosses(l_task, l_align, l_task)
    l_task = cross_entropy(E.select_rows(fw.labeled_logits, np.arange(n_ts_lab)), y_ts)
    return StepLosses(l_task, l_align, E.add(l_task, E.scalar_mul(l_align, hp.beta1)))


def outer_update(
    params: ModelParams, l_meta_train: Tensor, l_meta_test: Tensor, hp: HyperParams, iteration: int = 0
) -> ModelParams:
    """params - alpha1 * grad(l_meta_train + l_meta_test); the meta-test part flows through the inner step."""
    grads = E.grad(E.add(l_meta_train, l_meta_test), params.tensors())
    for g in grads:
        if not np.all(np.isfinite(g.data)):
            raise DivergenceError(iteration)
    return sgd_step(params, grads, hp.alpha1, track=False)


# ------------------------------------------------------------------- loops


EvalHook = Callable[[ModelParams], float]


def _check_sources(sources: DomainCollection, min_domains: int):
    if len(sources) < min_domains:
        raise ConfigurationError(f"need at least {min_domains} source domains, got {len(sources)}")
    for d in sources:
        if d.n_labeled == 0:
            raise ConfigurationError(f"domain {d.domain_id} has no labeled samples")


def default_model_config(sources: DomainCollection) -> ModelConfig:
    return ModelConfig(input_dim=sources.input_dim, num_classes=sources.num_classes)


def train(
    sources: DomainCollection,
    hp: HyperParams,
    eval_hook: EvalHook | None = None,
    model_config: ModelConfig | None = None,
    params: ModelParams | None = None,
) -> tuple[ModelParams, TrainLog]:
    """Episodic training on the source domains; deterministic given ``hp.seed``."""
    _check_sources(sources, 2)
    config = model_config or default_model_config(sources)
    params = params if params is not None else init_params(config, hp.seed)
    rng = np.random.default_rng([hp.seed, 1])
    by_id = {d.domain_id: d for d in sources}
    c = sources.num_classes
    tlog = TrainLog()
    for it in range(hp.iterations):
        split = split_domains(sources.ids, rng)
        tr = [sample_batch(by_id[i], hp.batch_per_domain, rng) for i in split.train_ids]
        ts = [sample_batch(by_id[i], hp.batch_per_domain, rng) for i in split.test_ids]
        inner, mt = meta_train_step(params, tr, hp, c)
        ms = meta_test_step(inner, tr, ts, hp, c)
        try:
            params = outer_update(params, mt.total, ms.total, hp, it)
        except DivergenceError as exc:
            exc.train_log = tlog
            raise
        vals = [mt.task.item(), mt.aux.item(), ms.task.item(), ms.aux.item()]
        total = mt.total.item() + ms.total.item()
        if not np.all(np.isfinite(vals + [total])):
            raise DivergenceError(it, tlog)
        tlog.record(*vals, total=total)
        if eval_hook is not None and (it + 1) % hp.eval_every == 0:
            tlog.evals.append((it + 1, float(eval_hook(params))))
    return params, tlog


def deepall_train(
    sources: DomainCollection,
    hp: HyperParams,
    eval_hook: EvalHook | None = None,
    model_config: ModelConfig | None = None,
    params: ModelParams | None = None,
) -> tuple[ModelParams, TrainLog]:
    """Plain SGD on the pooled labeled samples of all sources (step size alpha1)."""
    _check_sources(sources, 1)
    config = model_config or default_model_config(sources)
    params = params if params is not None else init_params(config, hp.seed)
    rng = np.random.default_rng([hp.seed, 1])
    x = np.concatenate([d.x_labeled for d in sources])
    y = np.concatenate([d.y_labeled for d in sources])
    batch = hp.batch_per_domain * len(sources)
    tlog = TrainLog()
    for it in range(hp.iterations):
        idx = rng.integers(len(y), size=batch)
        loss = cross_entropy(head_logits(params, extract_features(params, x[idx])), y[idx])
        grads = E.grad(loss, params.tensors())
        if not np.isfinite(loss.item()) or not all(np.all(np.isfinite(g.data)) for g in grads):
            raise DivergenceError(it, tlog)
        params = sgd_step(params, grads, hp.alpha1)
        tlog.record(loss.item(), total=loss.item())
        if eval_hook is not None and (it + 1) % hp.eval_every == 0:
            tlog.evals.append((it + 1, float(eval_hook(params))))
    return params, tlog
