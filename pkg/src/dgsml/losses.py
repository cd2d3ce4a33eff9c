"""Task cross-entropy, centroid-discrepancy and centroid-geometry alignment losses.

Centroids are held as a (C, D) tensor plus a ``present`` mask. Classes with
no contributing samples are absent: their row is zero and every loss skips
them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import engine as E
from .engine import ContractError, DimensionError, Tensor
from .model import ModelParams, extract_features, head_logits, logits as model_logits

LABELED = "labeled"
COMBINED = "labeled+unlabeled"


class AbsentClassError(LookupError):
    pass


def _labels(y, num_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y, dtype=np.intp).reshape(-1)
    if num_classes is not None and y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes})")
    return y


def one_hot(y, num_classes: int) -> np.ndarray:
    y = _labels(y, num_classes)
    out = np.zeros((y.size, num_classes))
    out[np.arange(y.size), y] = 1.0
    return out


# ------------------------------------------------------------------ task loss


def cross_entropy(logits: Tensor, y) -> Tensor:
    """Mean of -log softmax(logits)[y] over the batch, via log-sum-exp."""
    if logits.ndim != 2:
        raise DimensionError("cross_entropy expects (batch, C) logits")
    y = _labels(y, logits.shape[1])
    if y.size != logits.shape[0]:
        raise DimensionError(f"{y.size} labels for {logits.shape[0]} rows")
    if y.size == 0:
        raise ContractError("cross_entropy of an empty batch")
    picked = E.mul(E.log_softmax(logits, axis=1), Tensor(one_hot(y, logits.shape[1])))
    return E.scalar_mul(E.sum(picked), -1.0 / y.size)


def task_loss(params: ModelParams, x, y) -> Tensor:
    return cross_entropy(model_logits(params, x), y)


# -------------------------------------------------------------- pseudo labels


@dataclass
class PseudoLabeledBatch:
    features: Tensor
    labels: np.ndarray
    weights: Tensor

    def __len__(self) -> int:
        return len(self.labels)


def confidence_weights(logits: Tensor) -> Tensor:
    """1 - normalized Shannon entropy of softmax(logits), per row.

    Uses log-softmax directly, so p log p -> 0 as p -> 0 without a log(0).
    The relu only absorbs rounding below zero at uniform predictions.
    """
    c = logits.shape[1]
    logp = E.log_softmax(logits, axis=1)
    neg_entropy = E.sum(E.mul(E.exp(logp), logp), axis=1)
    return E.relu(E.add(E.scalar_mul(neg_entropy, 1.0 / math.log(c)), 1.0))


def pseudo_label_from_logits(features: Tensor, logits: Tensor) -> PseudoLabeledBatch:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class
    labels = np.argmax(logits.data, axis=1).astype(np.intp)
    return PseudoLabeledBatch(features, labels, confidence_weights(logits))


def pseudo_label(params: ModelParams, x_u) -> PseudoLabeledBatch:
    feats = extract_features(params, x_u)
    return pseudo_label_from_logits(feats, head_logits(params, feats))


def empty_pseudo(feature_dim: int) -> PseudoLabeledBatch:
    return PseudoLabeledBatch(Tensor(np.zeros((0, feature_dim))), np.zeros(0, np.intp), Tensor(np.zeros(0)))


# ------------------------------------------------------------------ centroids


@dataclass
class CentroidSet:
    centroids: Tensor  # (C, D); absent rows are zero
    present: np.ndarray  # (C,) bool
    domain_id: int | None = None
    variant: str = LABELED

    @property
    def num_classes(self) -> int:
        return len(self.present)

    def __getitem__(self, c: int) -> Tensor | None:
        if not self.present[c]:
            return None
        return E.reshape(E.select_rows(self.centroids, [c]), (self.centroids.shape[1],))


def _class_sums(features: Tensor, y: np.ndarray, num_classes: int) -> tuple[Tensor, np.ndarray]:
    if features.ndim != 2 or features.shape[0] != y.size:
        raise DimensionError(f"{features.shape} features for {y.size} labels")
    assign = one_hot(y, num_classes).T
    return E.matmul(Tensor(assign), features), assign.sum(axis=1)


def _scale_rows(sums: Tensor, counts: np.ndarray) -> Tensor:
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    return E.mul(sums, Tensor(inv[:, None]))


def labeled_centroids(features: Tensor, y, num_classes: int, domain_id=None) -> CentroidSet:
    """Per-class mean of labeled feature rows."""
    y = _labels(y, num_classes)
    sums, counts = _class_sums(features, y, num_classes)
    return CentroidSet(_scale_rows(sums, counts), counts > 0, domain_id, LABELED)


def combined_centroids(
    labeled_features: Tensor, y, pseudo: PseudoLabeledBatch, num_classes: int, domain_id=None
) -> CentroidSet:
    """(sum of labeled class-c rows + sum of w_i * pseudo-labeled class-c rows) / (N_c + N_pseudo_c).

    The denominator counts pseudo-labeled rows regardless of their weight.
    """
    y = _labels(y, num_classes)
    sums, counts = _class_sums(labeled_features, y, num_classes)
    if len(pseudo):
        if pseudo.features.shape[1] != labeled_features.shape[1]:
            raise DimensionError("labeled and pseudo-labeled features differ in width")
        assign = one_hot(pseudo.labels, num_classes).T
        weighted = E.mul(Tensor(assign), E.reshape(pseudo.weights, (1, len(pseudo))))
        sums = E.add(sums, E.matmul(weighted, pseudo.features))
        counts = counts + assign.sum(axis=1)
    return CentroidSet(_scale_rows(sums, counts), counts > 0, domain_id, COMBINED)


# ----------------------------------------------------------------- discrepancy


def _zero() -> Tensor:
    return Tensor(0.0)


def semi_supervised_loss(a: CentroidSet, b: CentroidSet) -> Tensor:
    """Sum over classes present in both sets of ||a_c - b_c||."""
    if a.num_classes != b.num_classes:
        raise DimensionError("centroid sets have different class counts")
    idx = np.flatnonzero(a.present & b.present)
    if idx.size == 0:
        return _zero()
    diff = E.sub(E.select_rows(a.centroids, idx), E.select_rows(b.centroids, idx))
    return E.sum(E.norm(diff, axis=1))


# ------------------------------------------------------------------ alignment


def _pair_operator(num_classes: int) -> np.ndarray:
    # row (i*C + j) of K @ centroids is centroid_i - centroid_j
    c = num_classes
    k = np.zeros((c * c, c))
    rows = np.arange(c * c)
    k[rows, rows // c] += 1.0
    k[rows, rows % c] -= 1.0
    return k


def pairwise_distances(cs: CentroidSet) -> Tensor:
    """(C, C) matrix of centroid distances; entries touching absent classes are meaningless."""
    c = cs.num_classes
    diffs = E.matmul(Tensor(_pair_operator(c)), cs.centroids)
    return E.reshape(E.norm(diffs, axis=1), (c, c))


class DistanceVector(NamedTuple):
    values: Tensor  # (C-1,); zero where skipped
    valid: np.ndarray  # (C-1,) bool; False marks an absent partner class
    partners: np.ndarray  # class index of each entry


def centroid_distance_vector(cs: CentroidSet, c: int) -> DistanceVector:
    """Distances from centroid ``c`` to every other centroid, in class order."""
    if not cs.present[c]:
        raise AbsentClassError(f"class {c} has no centroid")
    others = np.array([k for k in range(cs.num_classes) if k != c], dtype=np.intp)
    valid = cs.present[others]
    row = E.reshape(E.select_rows(pairwise_distances(cs), [c]), (cs.num_classes,))
    values = E.mul(E.select_rows(row, others), Tensor(valid.astype(np.float64)))
    return DistanceVector(values, valid, others)


def _alignment_pair(dist_a: Tensor, pa: np.ndarray, dist_b: Tensor, pb: np.ndarray) -> Tensor | None:
    both = pa & pb
    mask = np.outer(both, both)
    np.fill_diagonal(mask, False)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    diff = E.sub(E.select_rows(dist_a, rows), E.select_rows(dist_b, rows))
    diff = E.mul(diff, Tensor(mask[rows].astype(np.float64)))
    return E.sum(E.norm(diff, axis=1))


def alignment_loss(train_sets: Sequence[CentroidSet], test_sets: Sequence[CentroidSet]) -> Tensor:
    """Sum over classes and (train, test) domain pairs of ||V_c(train) - V_c(test)||.

    V_c is the vector of distances from centroid c to the other centroids of
    the same domain. Only positions where both domains have both endpoint
    centroids are compared.
    """
    dists_tr = [(pairwise_distances(s), s.present) for s in train_sets]
    dists_ts = [(pairwise_distances(s), s.present) for s in test_sets]
    total = None
    for da, pa in dists_tr:
        for db, pb in dists_ts:
            term = _alignment_pair(da, pa, db, pb)
            if term is not None:
                total = term if total is None else E.add(total, term)
    return _zero() if total is None else total
