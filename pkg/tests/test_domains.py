import numpy as np
import pytest

from dgsml.domains import (
    UNLABELED,
    ConfigurationError,
    ParseError,
    generate_rotated_moons,
    generate_shifted_gaussians,
    leave_one_domain_out,
    mask_labels,
    read_collection,
    read_csv,
    write_collection,
    write_csv,
    class_centers,
)


@pytest.fixture(scope="module")
def moons():
    return generate_rotated_moons(4, 200, [0, 30, 60, 90], 0.1, 7)


def test_generation_is_reproducible(moons):
    again = generate_rotated_moons(4, 200, [0, 30, 60, 90], 0.1, 7)
    for a, b in zip(moons, again):
        assert a.x_labeled.tobytes() == b.x_labeled.tobytes()
        assert a.y_labeled.tobytes() == b.y_labeled.tobytes()


def test_moons_class_balance(moons):
    for d in moons:
        assert d.n_labeled == 200 and d.n_unlabeled == 0
        assert np.bincount(d.y_labeled).tolist() == [100, 100]


def test_same_rotation_differs_only_by_sampling():
    coll = generate_rotated_moons(2, 4000, [0, 0], 0.1, 1)
    a, b = coll.domains
    assert not np.array_equal(a.x_labeled, b.x_labeled)
    for c in (0, 1):
        ma = a.x_labeled[a.y_labeled == c].mean(axis=0)
        mb = b.x_labeled[b.y_labeled == c].mean(axis=0)
        assert np.linalg.norm(ma - mb) < 0.1


def test_rotation_180_negates():
    coll = generate_rotated_moons(2, 50, [0, 180], 0.0, 3)
    base = generate_rotated_moons(2, 50, [0, 0], 0.0, 3)
    np.testing.assert_allclose(coll.domains[1].x_labeled, -base.domains[1].x_labeled, atol=1e-12)


@pytest.mark.parametrize(
    "kwargs",
    [dict(n_domains=1, rotations=[0]), dict(samples_per_domain=3), dict(samples_per_domain=201), dict(rotations=[0, 30])],
)
def test_moons_invalid_sizes(kwargs):
    args = dict(n_domains=4, samples_per_domain=200, rotations=[0, 30, 60, 90])
    args.update(kwargs)
    with pytest.raises(ConfigurationError):
        generate_rotated_moons(**args)


def test_gaussians_zero_noise_collapse():
    coll = generate_shifted_gaussians(3, 4, 40, 2.0, [0.0, 1.0, 2.0], 0.0, 0)
    for d in coll:
        for c in range(4):
            rows = d.x_labeled[d.y_labeled == c]
            assert np.all(rows == rows[0])


def test_gaussians_zero_translation_iid():
    coll = generate_shifted_gaussians(2, 3, 3000, 2.0, [0.0, 0.0], 0.5, 0)
    a, b = coll.domains
    for c in range(3):
        ma = a.x_labeled[a.y_labeled == c].mean(axis=0)
        mb = b.x_labeled[b.y_labeled == c].mean(axis=0)
        assert np.all(np.abs(ma - mb) < 6 * 0.5 / np.sqrt(1000))


@pytest.mark.parametrize("seed", range(5))
def test_gaussian_centroid_within_lln_bound(seed):
    sd, n = 0.5, 100
    trans = [0.0, 1.5]
    coll = generate_shifted_gaussians(2, 3, 3 * n, 2.0, trans, sd, seed)
    centers = class_centers(3, 2, 2.0)
    for d, t in zip(coll, trans):
        for c in range(3):
            got = d.x_labeled[d.y_labeled == c].mean(axis=0)
            want = centers[c] + t / np.sqrt(2)
            assert np.all(np.abs(got - want) <= 3 * sd / np.sqrt(n))


def test_mask_rate_zero_is_identity(moons):
    assert mask_labels(moons, 0.0, 1) is moons


def test_mask_95_percent(moons):
    masked = mask_labels(moons, 0.95, 0)
    for d in masked:
        assert d.n_labeled == 10 and d.n_unlabeled == 190
        assert set(d.y_labeled.tolist()) == {0, 1}


def test_mask_preserves_samples_exactly(moons):
    masked = mask_labels(moons, 0.6, 4)
    for a, b in zip(moons, masked):
        before = sorted(map(tuple, a.x_labeled))
        after = sorted(map(tuple, np.concatenate([b.x_labeled, b.x_unlabeled])))
        assert before == after
        # hidden labels line up with the moved rows
        lookup = {tuple(x): y for x, y in zip(a.x_labeled, a.y_labeled)}
        assert [lookup[tuple(x)] for x in b.x_unlabeled] == b.y_hidden.tolist()


def test_mask_is_deterministic(moons):
    a, b = mask_labels(moons, 0.5, 9), mask_labels(moons, 0.5, 9)
    assert a.equals(b)
    assert not a.equals(mask_labels(moons, 0.5, 10))


@pytest.mark.parametrize("rate", [0.5, 0.9, 0.95])
def test_mask_keeps_every_class_labeled(rate):
    coll = generate_shifted_gaussians(3, 5, 100, 2.0, None, 0.3, 2)
    for d in mask_labels(coll, rate, 3):
        assert set(d.y_labeled.tolist()) == set(range(5))


def test_mask_impossible_raises():
    coll = generate_shifted_gaussians(2, 5, 10, 2.0, None, 0.3, 2)
    with pytest.raises(ConfigurationError):
        mask_labels(coll, 0.8, 0)


@pytest.mark.parametrize("rate", [-0.1, 1.0])
def test_mask_rate_range(moons, rate):
    with pytest.raises(ConfigurationError):
        mask_labels(moons, rate, 0)


def test_leave_one_out(moons):
    sources, target = leave_one_domain_out(moons, 2)
    assert sources.ids == [0, 1, 3] and target.domain_id == 2
    covered = []
    for t in moons.ids:
        s, tg = leave_one_domain_out(moons, t)
        covered.append(tg.domain_id)
        assert sorted(s.ids + [tg.domain_id]) == moons.ids
    assert covered == moons.ids
    with pytest.raises(ConfigurationError):
        leave_one_domain_out(moons, 9)


def test_csv_round_trip(tmp_path, moons):
    masked = mask_labels(moons, 0.7, 1)
    write_collection(masked, tmp_path)
    back = read_collection(tmp_path)
    assert back.equals(masked)
    assert back.metadata["generator"] == "moons"
    lines = (tmp_path / "dataset.csv").read_text().splitlines()
    assert lines[0] == "domain,label,f0,f1"
    assert any(line.split(",")[1] == str(UNLABELED) for line in lines[1:])


def test_csv_header_mismatch(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("domain,label,f0,g1\n0,1,0.5,0.5\n")
    with pytest.raises(ParseError, match="g1"):
        read_csv(path)


def test_csv_malformed_row_reports_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("domain,label,f0\n0,1,0.5\n0,x,0.1\n")
    with pytest.raises(ParseError) as err:
        read_csv(path)
    assert err.value.line == 3


def test_write_csv_uses_17_digits(tmp_path, moons):
    path = tmp_path / "d.csv"
    write_csv(moons, path)
    back = read_csv(path)
    assert back.equals(moons)
