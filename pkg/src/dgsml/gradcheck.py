"""Central finite-difference checks for engine ops and for the full meta-gradient.

Each op check builds random small inputs (entries in [-2, 2], dims <= 8),
reduces the op output to a scalar with a fixed random weighting, and compares
``engine.grad`` with central differences. The meta-gradient check does the
same for l_meta_train + l_meta_test of a small two-layer network, where the
meta-test part depends on the parameters through the inner SGD step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import engine as E
from .engine import Tensor

H = 1e-5
OP_TOL = 1e-4
META_TOL = 1e-3


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = H) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-7) -> float:
    """||a - b|| / max(||a||, ||b||, floor); the floor only matters for (near-)zero gradients."""
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


@dataclass
class CheckResult:
    name: str
    cases: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _dims(rng, k):
    return tuple(int(d) for d in rng.integers(1, 9, size=k))


def _away_from(rng, shape, lo, hi, gap):
    x = rng.uniform(lo, hi, size=shape)
    bad = np.abs(x) < gap
    while bad.any():
        x[bad] = rng.uniform(lo, hi, size=bad.sum())
        bad = np.abs(x) < gap
    return x


def _positive(rng, shape):
    return rng.uniform(0.2, 2.0, size=shape)


def _op_cases() -> dict[str, Callable]:
    """op name -> case builder(rng) returning (fn(*tensors) -> Tensor, list of input arrays)."""

    def elementwise(fn, gen=lambda rng, s: rng.uniform(-2, 2, s), broadcast=False):
        def build(rng):
            m, n = _dims(rng, 2)
            a = gen(rng, (m, n))
            if broadcast and rng.random() < 0.5:
                b = gen(rng, (1, n) if rng.random() < 0.5 else (m, 1))
            else:
                b = gen(rng, (m, n))
            return fn, [a, b]

        return build

    def unary(fn, gen=lambda rng, s: rng.uniform(-2, 2, s)):
        def build(rng):
            return fn, [gen(rng, _dims(rng, 2))]

        return build

    def matmul(rng):
        m, k, n = _dims(rng, 3)
        return E.matmul, [rng.uniform(-2, 2, (m, k)), rng.uniform(-2, 2, (k, n))]

    def concat(rng):
        n = int(rng.integers(1, 9))
        parts = [rng.uniform(-2, 2, (int(rng.integers(1, 9)), n)) for _ in range(int(rng.integers(1, 4)))]
        return (lambda *ts: E.concat_rows(ts)), parts

    def select(rng):
        m, n = _dims(rng, 2)
        idx = rng.integers(0, m, size=int(rng.integers(1, 9)))
        return (lambda a: E.select_rows(a, idx)), [rng.uniform(-2, 2, (m, n))]

    def summ(rng):
        axis = [None, 0, 1][int(rng.integers(3))]
        return (lambda a: E.sum(a, axis=axis)), [rng.uniform(-2, 2, _dims(rng, 2))]

    def mean(rng):
        axis = [None, 0, 1][int(rng.integers(3))]
        return (lambda a: E.mean(a, axis=axis)), [rng.uniform(-2, 2, _dims(rng, 2))]

    def scalar_mul(rng):
        s = float(rng.uniform(-2, 2))
        return (lambda a: E.scalar_mul(a, s)), [rng.uniform(-2, 2, _dims(rng, 2))]

    def norm(rng):
        axis = [None, 1][int(rng.integers(2))]
        return (lambda a: E.norm(a, axis=axis)), [_away_from(rng, _dims(rng, 2), -2, 2, 0.05)]

    def reshape(rng):
        m, n = _dims(rng, 2)
        return (lambda a: E.reshape(a, (n, m))), [rng.uniform(-2, 2, (m, n))]

    return {
        "add": elementwise(E.add, broadcast=True),
        "sub": elementwise(E.sub, broadcast=True),
        "mul": elementwise(E.mul, broadcast=True),
        "scalar_mul": scalar_mul,
        "matmul": matmul,
        "relu": unary(E.relu, lambda rng, s: _away_from(rng, s, -2, 2, 1e-3)),
        "exp": unary(E.exp),
        "log": unary(E.log, _positive),
        "reciprocal": unary(E.reciprocal, lambda rng, s: _away_from(rng, s, -2, 2, 0.2)),
        "sum": summ,
        "mean": mean,
        "concat_rows": concat,
        "select_rows": select,
        "squared_l2_norm": unary(E.squared_l2_norm),
        "norm": norm,
        "transpose": unary(E.transpose),
        "reshape": reshape,
        "softmax": unary(lambda a: E.softmax(a, axis=1)),
        "log_softmax": unary(lambda a: E.log_softmax(a, axis=1)),
        "logsumexp": unary(lambda a: E.logsumexp(a, axis=1)),
    }


OP_NAMES = list(_op_cases())
# ops whose second derivative is nonzero somewhere and smooth on the sampled inputs
SECOND_ORDER_OPS = ["mul", "matmul", "exp", "log", "reciprocal", "squared_l2_norm", "norm", "softmax", "log_softmax", "logsumexp"]


def _weighted_scalar(fn, arrays, weights):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*ts)
    return E.sum(E.mul(out, Tensor(weights))), ts


def check_op(name: str, cases: int = 100, seed: int = 0, corrupt: float = 0.0) -> CheckResult:
    """First-order check; ``corrupt`` scales the analytic gradient by (1 + corrupt)."""
    build = _op_cases()[name]
    rng = np.random.default_rng([seed, OP_NAMES.index(name)])
    worst = 0.0
    for _ in range(cases):
        fn, arrays = build(rng)
        with E.no_grad():
            shape = fn(*[Tensor(a) for a in arrays]).shape
        weights = rng.uniform(-1, 1, size=shape)
        loss, ts = _weighted_scalar(fn, arrays, weights)
        analytic = E.grad(loss, ts)
        for i, a in enumerate(arrays):

            def f(x, i=i):
                args = [Tensor(x if j == i else arrays[j]) for j in range(len(arrays))]
                with E.no_grad():
                    return float(np.sum(fn(*args).data * weights))

            num = numeric_grad(f, a)
            worst = max(worst, rel_error(analytic[i].data * (1.0 + corrupt), num))
    return CheckResult(name, cases, worst, OP_TOL)


def check_op_second_order(name: str, cases: int = 100, seed: int = 0) -> CheckResult:
    """Directional second derivative: grad of <grad f, v> against differences of grad f."""
    build = _op_cases()[name]
    rng = np.random.default_rng([seed, 1000 + OP_NAMES.index(name)])
    worst = 0.0
    for _ in range(cases):
        fn, arrays = build(rng)
        with E.no_grad():
            shape = fn(*[Tensor(a) for a in arrays]).shape
        weights = rng.uniform(-1, 1, size=shape)
        vs = [rng.uniform(-1, 1, size=a.shape) for a in arrays]
        loss, ts = _weighted_scalar(fn, arrays, weights)
        gs = E.grad(loss, ts, create_graph=True)
        gv = Tensor(0.0)
        for g, v in zip(gs, vs):
            gv = E.add(gv, E.sum(E.mul(g, Tensor(v))))
        analytic = E.grad(gv, ts)
        for i, a in enumerate(arrays):

            def f(x, i=i):
                l, tt = _weighted_scalar(fn, [x if j == i else arrays[j] for j in range(len(arrays))], weights)
                return float(sum(np.sum(g.data * v) for g, v in zip(E.grad(l, tt), vs)))

            worst = max(worst, rel_error(analytic[i].data, numeric_grad(f, a)))
    return CheckResult(f"{name} (2nd order)", cases, worst, OP_TOL)


# ----------------------------------------------------------- meta-gradient check


def meta_objective_setup(seed: int = 0, alpha0: float = 0.1, beta0: float = 1.0, beta1: float = 1.0):
    """Small net + fixed episode: 3 moons domains x 20 samples, half unlabeled.

    Returns (params, objective) where objective(params) gives
    (l_meta_train, l_meta_test) with the inner step recorded.
    """
    from .domains import generate_rotated_moons, mask_labels
    from .model import ModelConfig, init_params
    from .trainer import DomainBatch, HyperParams, meta_test_step, meta_train_step

    coll = mask_labels(generate_rotated_moons(3, 20, [0.0, 40.0, 80.0], 0.1, seed), 0.5, seed)
    batches = [DomainBatch(d.domain_id, d.x_labeled, d.y_labeled, d.x_unlabeled) for d in coll]
    config = ModelConfig(input_dim=2, hidden_dims=(8,), feature_dim=4, num_classes=2)
    params = init_params(config, seed)
    hp = HyperParams(alpha0=alpha0, beta0=beta0, beta1=beta1, second_order=True, seed=seed)

    def objective(p):
        inner, mt = meta_train_step(p, batches[:2], hp, 2)
        ms = meta_test_step(inner, batches[:2], batches[2:], hp, 2)
        return mt.total, ms.total

    return params, objective


def check_meta_gradient(seed: int = 0, corrupt: float = 0.0) -> CheckResult:
    params, objective = meta_objective_setup(seed)
    l_mt, l_ms = objective(params)
    analytic = np.concatenate([g.data.ravel() for g in E.grad(E.add(l_mt, l_ms), params.tensors())])

    def f(vec):
        a, b = objective(params.from_flat(vec))
        return a.item() + b.item()

    num = numeric_grad(f, params.flat())
    return CheckResult("meta-gradient (second order)", 1, rel_error(analytic * (1.0 + corrupt), num), META_TOL)


def run_all(cases: int = 100, seed: int = 0, second_order: bool = True, corrupt: dict[str, float] | None = None) -> list[CheckResult]:
    corrupt = corrupt or {}
    results = [check_op(n, cases, seed, corrupt.get(n, 0.0)) for n in OP_NAMES]
    if second_order:
        results += [check_op_second_order(n, max(cases // 4, 1), seed) for n in SECOND_ORDER_OPS]
    results.append(check_meta_gradient(seed, corrupt.get("meta", 0.0)))
    return results
