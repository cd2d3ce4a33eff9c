from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from dgsml import engine as E
from dgsml.domains import (
    ConfigurationError,
    DomainCollection,
    DomainDataset,
    generate_rotated_moons,
    generate_shifted_gaussians,
    leave_one_domain_out,
    mask_labels,
)
from dgsml.engine import Tensor
from dgsml.gradcheck import META_TOL, check_meta_gradient
from dgsml.losses import cross_entropy
from dgsml.model import ModelConfig, ModelParams, accuracy, init_params, logits, sgd_step
from dgsml.trainer import (
    DivergenceError,
    EpisodeError,
    HyperParams,
    deepall_train,
    meta_test_step,
    meta_train_step,
    outer_update,
    sample_batch,
    split_domains,
    train,
)

SMALL = ModelConfig(input_dim=2, hidden_dims=(6,), feature_dim=4, num_classes=2)


@pytest.fixture(scope="module")
def sources():
    coll = generate_rotated_moons(4, 40, [0, 30, 60, 90], 0.1, 3)
    src, _ = leave_one_domain_out(coll, 0)
    return mask_labels(src, 0.5, 1)


def _batches(sources, seed=0, size=8):
    rng = np.random.default_rng(seed)
    split = split_domains(sources.ids, rng)
    tr = [sample_batch(sources.get(i), size, rng) for i in split.train_ids]
    ts = [sample_batch(sources.get(i), size, rng) for i in split.test_ids]
    return tr, ts


def _same(a: ModelParams, b: ModelParams, atol=0.0):
    for x, y in zip(a.tensors(), b.tensors()):
        if atol == 0.0:
            assert x.data.tobytes() == y.data.tobytes()
        else:
            np.testing.assert_allclose(x.data, y.data, rtol=0, atol=atol)


# ----------------------------------------------------------------- episodes


def test_split_frequency_is_uniform():
    rng = np.random.default_rng(0)
    counts = Counter(split_domains([4, 7, 9], rng).test_ids[0] for _ in range(3000))
    for d in (4, 7, 9):
        assert abs(counts[d] / 3000 - 1 / 3) <= 0.03


def test_split_is_disjoint_union():
    rng = np.random.default_rng(1)
    for _ in range(50):
        s = split_domains([0, 1, 2, 3], rng)
        assert len(s.test_ids) == 1 and s.train_ids
        assert sorted(s.train_ids + s.test_ids) == [0, 1, 2, 3]


def test_two_domain_split_is_forced():
    s = split_domains([2, 5], np.random.default_rng(3))
    assert len(s.train_ids) == 1 and len(s.test_ids) == 1
    assert set(s.train_ids + s.test_ids) == {2, 5}


def test_split_is_deterministic():
    a = [split_domains([0, 1, 2], np.random.default_rng(9)) for _ in range(2)]
    assert a[0] == a[1]


def test_split_needs_two_domains():
    with pytest.raises(ConfigurationError):
        split_domains([0], np.random.default_rng(0))


def test_sample_batch_sizes(sources):
    rng = np.random.default_rng(0)
    d = sources.domains[0]
    b = sample_batch(d, 8, rng)
    assert len(b.y_labeled) == 8 and len(b.x_unlabeled) == 8
    small = sample_batch(d, d.n_unlabeled + 5, rng)
    np.testing.assert_array_equal(small.x_unlabeled, d.x_unlabeled)


def test_sample_batch_without_labels_raises():
    d = DomainDataset(0, np.zeros((0, 2)), np.zeros(0, dtype=int), np.zeros((3, 2)), np.zeros(3, dtype=int))
    with pytest.raises(EpisodeError):
        sample_batch(d, 4, np.random.default_rng(0))


# --------------------------------------------------------------- single steps


def test_zero_inner_rate_keeps_params(sources):
    p = init_params(SMALL, 0)
    tr, _ = _batches(sources)
    inner, _ = meta_train_step(p, tr, HyperParams(alpha0=0.0), 2)
    _same(p, inner)


def test_meta_train_loss_dominates_task_loss(sources):
    p = init_params(SMALL, 1)
    tr, _ = _batches(sources, 2)
    _, losses = meta_train_step(p, tr, HyperParams(beta0=0.7), 2)
    assert losses.aux.item() >= 0.0
    assert losses.total.item() >= losses.task.item()
    assert losses.total.item() == pytest.approx(losses.task.item() + 0.7 * losses.aux.item(), rel=1e-14)


def test_beta1_zero_gives_cross_entropy_at_inner(sources):
    p = init_params(SMALL, 2)
    tr, ts = _batches(sources, 3)
    hp = HyperParams(beta1=0.0)
    inner, _ = meta_train_step(p, tr, hp, 2)
    ms = meta_test_step(inner, tr, ts, hp, 2)
    ref = cross_entropy(logits(inner, ts[0].x_labeled), ts[0].y_labeled)
    assert ms.total.item() == pytest.approx(ref.item(), rel=1e-13)


def test_identical_domains_have_zero_alignment():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(12, 2))
    y = np.array([0, 1] * 6)
    d0 = DomainDataset(0, x, y, x[:4], y[:4])
    d1 = DomainDataset(1, x, y, x[:4], y[:4])
    coll = DomainCollection((d0, d1), 2, 2)
    b = [sample_batch(d, 6, np.random.default_rng(5)) for d in coll]
    p = init_params(SMALL, 0)
    inner, _ = meta_train_step(p, [b[0]], HyperParams(), 2)
    ms = meta_test_step(inner, [b[0]], [b[1]], HyperParams(), 2)
    assert ms.aux.item() == pytest.approx(0.0, abs=1e-12)


def test_zero_outer_rate_keeps_params(sources):
    p = init_params(SMALL, 0)
    tr, ts = _batches(sources)
    hp = HyperParams(alpha1=0.0)
    inner, mt = meta_train_step(p, tr, hp, 2)
    ms = meta_test_step(inner, tr, ts, hp, 2)
    _same(p, outer_update(p, mt.total, ms.total, hp))


def test_plain_episode_equals_two_sgd_steps(sources):
    # beta0 = beta1 = 0, first-order: inner step on D_tr loss, outer step on the summed gradients
    p = init_params(SMALL, 5)
    tr, ts = _batches(sources, 6)
    hp = HyperParams(alpha0=0.1, alpha1=0.07, beta0=0.0, beta1=0.0, second_order=False)
    inner, mt = meta_train_step(p, tr, hp, 2)
    ms = meta_test_step(inner, tr, ts, hp, 2)
    got = outer_update(p, mt.total, ms.total, hp)

    x_tr = np.concatenate([b.x_labeled for b in tr])
    y_tr = np.concatenate([b.y_labeled for b in tr])
    g_tr = E.grad(cross_entropy(logits(p, x_tr), y_tr), p.tensors())
    manual_inner = sgd_step(p, g_tr, 0.1)
    g_ts = E.grad(cross_entropy(logits(manual_inner, ts[0].x_labeled), ts[0].y_labeled), manual_inner.tensors())
    expected = sgd_step(p, [Tensor(a.data + b.data) for a, b in zip(g_tr, g_ts)], 0.07)
    _same(got, expected, atol=1e-14)


def _toy(second_order: bool, theta0=1.3, alpha0=0.2, alpha1=0.1):
    # l_mt = theta^2, l_ms = theta'^2 with theta' = theta - alpha0 * 2 theta
    p = ModelParams({"W0": Tensor([theta0], requires_grad=True)}, {})
    w = p.theta["W0"]
    l_mt = E.squared_l2_norm(w)
    grads = E.grad(l_mt, [w], create_graph=second_order)
    inner = sgd_step(p, grads, alpha0, track=True)
    l_ms = E.squared_l2_norm(inner.theta["W0"])
    hp = HyperParams(alpha0=alpha0, alpha1=alpha1, second_order=second_order)
    return outer_update(p, l_mt, l_ms, hp).theta["W0"].data[0]


@pytest.mark.parametrize("theta0, alpha0", [(1.3, 0.2), (-0.7, 0.05), (2.0, 0.4)])
def test_quadratic_toy_outer_gradient(theta0, alpha0):
    alpha1 = 0.1
    shrink = 1 - 2 * alpha0
    exact = 2 * theta0 + 2 * shrink * shrink * theta0
    first = 2 * theta0 + 2 * shrink * theta0
    assert abs(_toy(True, theta0, alpha0, alpha1) - (theta0 - alpha1 * exact)) <= 1e-10
    assert abs(_toy(False, theta0, alpha0, alpha1) - (theta0 - alpha1 * first)) <= 1e-10
    # the modes differ by exactly the (1 - alpha0 H) factor on the meta-test term
    meta_exact = (theta0 - _toy(True, theta0, alpha0, alpha1)) / alpha1 - 2 * theta0
    meta_first = (theta0 - _toy(False, theta0, alpha0, alpha1)) / alpha1 - 2 * theta0
    assert meta_exact == pytest.approx(shrink * meta_first, abs=1e-10)


def test_meta_gradient_matches_finite_differences():
    res = check_meta_gradient(seed=0)
    assert res.max_rel_error < META_TOL, res


def test_nonfinite_gradient_raises():
    p = init_params(SMALL, 0)
    w = p.theta["W0"]
    bad = E.scalar_mul(E.sum(w), float("nan"))
    with pytest.raises(DivergenceError) as err:
        outer_update(p, bad, Tensor(0.0), HyperParams(), iteration=17)
    assert err.value.iteration == 17


# -------------------------------------------------------------------- loops


def test_zero_iterations_returns_initial_params(sources):
    p0 = init_params(SMALL, 3)
    p, log = train(sources, HyperParams(iterations=0, seed=3), model_config=SMALL)
    _same(p, p0)
    assert len(log) == 0


def test_training_is_bitwise_deterministic(sources):
    hp = HyperParams(iterations=15, seed=4)
    a, la = train(sources, hp, model_config=SMALL)
    b, lb = train(sources, hp, model_config=SMALL)
    _same(a, b)
    assert la.total == lb.total


def test_logged_losses_are_finite(sources):
    _, log = train(sources, HyperParams(iterations=30), model_config=SMALL)
    for series in (log.l_task_tr, log.l_sl, log.l_task_ts, log.l_align, log.total):
        assert len(series) == 30 and np.all(np.isfinite(series))


def test_eval_hook_cadence(sources):
    seen = []
    _, log = train(sources, HyperParams(iterations=25, eval_every=10), lambda p: seen.append(1) or 0.5, SMALL)
    assert [it for it, _ in log.evals] == [10, 20] and len(seen) == 2


def test_nan_data_diverges(sources):
    d = sources.domains[0]
    poisoned = DomainDataset(d.domain_id, np.full_like(d.x_labeled, np.nan), d.y_labeled, d.x_unlabeled, d.y_hidden)
    coll = DomainCollection((poisoned,) + tuple(sources.domains[1:]), 2, 2)
    with pytest.raises(DivergenceError) as err:
        train(coll, HyperParams(iterations=5), model_config=SMALL)
    assert err.value.train_log is not None


def test_train_needs_two_sources(sources):
    one = DomainCollection(sources.domains[:1], 2, 2)
    with pytest.raises(ConfigurationError):
        train(one, HyperParams(iterations=1))


def test_separable_domains_reach_high_target_accuracy():
    coll = generate_shifted_gaussians(3, 2, 80, 4.0, [0.0, 0.5, 1.0], 0.3, 0)
    src, tgt = leave_one_domain_out(coll, 2)
    src = mask_labels(src, 0.5, 0)
    params, _ = train(src, HyperParams(iterations=500, seed=0))
    assert accuracy(params, tgt.x_labeled, tgt.y_labeled) > 0.9


# ------------------------------------------------------------------ DeepAll


def test_deepall_single_domain_is_plain_sgd():
    coll = generate_rotated_moons(2, 40, [0, 45], 0.1, 0)
    one = DomainCollection(coll.domains[:1], 2, 2)
    hp = HyperParams(iterations=12, alpha1=0.1, batch_per_domain=5, seed=2)
    got, _ = deepall_train(one, hp, model_config=SMALL)

    p = init_params(SMALL, 2)
    rng = np.random.default_rng([2, 1])
    d = one.domains[0]
    for _ in range(12):
        idx = rng.integers(d.n_labeled, size=5)
        p = sgd_step(p, E.grad(cross_entropy(logits(p, d.x_labeled[idx]), d.y_labeled[idx]), p.tensors()), 0.1)
    _same(got, p)


def test_deepall_ignores_unlabeled(sources):
    stripped = DomainCollection(
        tuple(replace(d, x_unlabeled=np.zeros((0, 2)), y_hidden=np.zeros(0, dtype=int)) for d in sources),
        2,
        2,
    )
    hp = HyperParams(iterations=20, seed=1)
    a, _ = deepall_train(sources, hp, model_config=SMALL)
    b, _ = deepall_train(stripped, hp, model_config=SMALL)
    _same(a, b)


def test_deepall_is_deterministic(sources):
    hp = HyperParams(iterations=20, seed=6)
    a, _ = deepall_train(sources, hp, model_config=SMALL)
    b, _ = deepall_train(sources, hp, model_config=SMALL)
    _same(a, b)


def test_masking_shrinks_deepall_training_set():
    coll = generate_rotated_moons(3, 60, [0, 30, 60], 0.1, 0)
    sizes = [sum(d.n_labeled for d in mask_labels(coll, r, 0)) for r in (0.0, 0.5, 0.9)]
    assert sizes[0] > sizes[1] > sizes[2]
