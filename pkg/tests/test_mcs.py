import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chainmerge.errors import InsufficientSamples, InvalidShape
from chainmerge.harness import ExperimentSpec, prepare_models
from chainmerge.mcs import GaussianStats, _closed_form, frechet_distance, gaussian_stats, mcs_report
from chainmerge.merge import MergeConfig, TaskBundle, merge
from chainmerge.model import build_mlp


def random_gaussian(rng, d, spread=1.0):
    b = rng.normal(size=(d, d + 3))
    return GaussianStats(spread * rng.normal(size=d), b @ b.T / (d + 3), 100)


def test_constant_columns_have_zero_covariance():
    x = np.tile([[1.0], [-2.0], [0.5]], (1, 6))
    s = gaussian_stats(x)
    np.testing.assert_array_equal(s.mean, [1.0, -2.0, 0.5])
    np.testing.assert_array_equal(s.cov, np.zeros((3, 3)))


def test_two_point_hand_values():
    s = gaussian_stats(np.array([[0.0, 2.0], [0.0, 0.0]]))
    np.testing.assert_array_equal(s.mean, [1.0, 0.0])
    np.testing.assert_array_equal(s.cov, [[2.0, 0.0], [0.0, 0.0]])


def test_stats_match_two_pass_loop_seed9():
    x = np.random.default_rng(9).normal(size=(4, 200))
    d, n = x.shape
    mu = [sum(x[p, k] for k in range(n)) / n for p in range(d)]
    cov = np.zeros((d, d))
    for p in range(d):
        for q in range(d):
            cov[p, q] = sum((x[p, k] - mu[p]) * (x[q, k] - mu[q]) for k in range(n)) / (n - 1)
    s = gaussian_stats(x)
    assert np.linalg.norm(s.mean - mu) <= 1e-12 * np.linalg.norm(mu)
    assert np.linalg.norm(s.cov - cov) <= 1e-12 * np.linalg.norm(cov)


def test_stats_need_two_samples():
    with pytest.raises(InsufficientSamples):
        gaussian_stats(np.ones((3, 1)))


def test_frechet_identical_is_zero():
    a = random_gaussian(np.random.default_rng(0), 5)
    assert frechet_distance(a, a) <= 1e-9


def test_frechet_identity_covariance_is_mean_gap():
    mu = np.array([1.0, -2.0, 0.5])
    a = GaussianStats(np.zeros(3), np.eye(3), 10)
    b = GaussianStats(mu, np.eye(3), 10)
    assert frechet_distance(a, b) == pytest.approx(float(mu @ mu), abs=1e-9)


def test_frechet_commuting_diagonals():
    assert frechet_distance(
        GaussianStats(np.zeros(1), np.diag([4.0]), 5), GaussianStats(np.zeros(1), np.diag([1.0]), 5)
    ) == pytest.approx(1.0, abs=1e-12)
    a, b = np.array([0.3, 2.0, 5.0, 1.0]), np.array([1.0, 0.5, 5.0, 4.0])
    expected = float(np.sum((np.sqrt(a) - np.sqrt(b)) ** 2))
    got = frechet_distance(GaussianStats(np.zeros(4), np.diag(a), 5), GaussianStats(np.zeros(4), np.diag(b), 5))
    assert got == pytest.approx(expected, abs=1e-9)


def test_frechet_dimension_mismatch():
    with pytest.raises(InvalidShape):
        frechet_distance(GaussianStats(np.zeros(2), np.eye(2), 3), GaussianStats(np.zeros(3), np.eye(3), 3))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 16), st.integers(0, 2**32 - 1))
def test_frechet_symmetric(d, seed):
    rng = np.random.default_rng(seed)
    a, b = random_gaussian(rng, d), random_gaussian(rng, d)
    dab, dba = frechet_distance(a, b), frechet_distance(b, a)
    assert abs(dab - dba) <= 1e-8 * (1 + dab)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 16), st.integers(0, 2**32 - 1))
def test_frechet_self_distance_small(d, seed):
    a = random_gaussian(np.random.default_rng(seed), d)
    assert frechet_distance(a, a) == 0.0
    # the numerical path, bypassing the identical-input shortcut
    assert abs(_closed_form(a, a)) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2**32 - 1))
def test_frechet_translation_invariant(d, seed):
    rng = np.random.default_rng(seed)
    a, b = random_gaussian(rng, d), random_gaussian(rng, d)
    v = rng.normal(size=d) * 3
    moved = frechet_distance(GaussianStats(a.mean + v, a.cov, 5), GaussianStats(b.mean + v, b.cov, 5))
    assert moved == pytest.approx(frechet_distance(a, b), abs=1e-10)


@pytest.mark.slow
def test_frechet_against_grid_transport():
    from scipy import sparse
    from scipy.optimize import linprog
    from scipy.stats import multivariate_normal

    m1, c1 = np.array([0.0, 0.0]), np.array([[1.0, 0.3], [0.3, 0.6]])
    m2, c2 = np.array([1.2, -0.5]), np.array([[0.5, -0.1], [-0.1, 1.2]])
    k, h = 18, 0.4
    gx = (np.arange(k) - (k - 1) / 2) * h + 0.6
    gy = (np.arange(k) - (k - 1) / 2) * h - 0.25
    pts = np.array([(a, b) for a in gx for b in gy])
    p = multivariate_normal(m1, c1).pdf(pts)
    q = multivariate_normal(m2, c2).pdf(pts)
    p, q = p / p.sum(), q / q.sum()
    cost = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    n = len(pts)
    a_eq = sparse.vstack(
        [sparse.kron(sparse.eye(n), np.ones((1, n))), sparse.kron(np.ones((1, n)), sparse.eye(n))]
    ).tocsr()[:-1]
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=np.concatenate([p, q])[:-1], bounds=(0, None), method="highs")
    assert res.status == 0
    closed = frechet_distance(GaussianStats(m1, c1, 2), GaussianStats(m2, c2, 2))
    assert abs(res.fun - closed) <= 0.05 * closed


# -- reports ----------------------------------------------------------------


def test_report_self_merge_is_zero():
    rng = np.random.default_rng(1)
    model = build_mlp([5, 6, 3], "tanh", rng=rng)
    bundle = TaskBundle(model, rng.normal(size=(5, 40)), "t")
    report = mcs_report([bundle], model)
    assert report.grand_total <= 1e-9
    assert all(d <= 1e-9 for layer in report.per_layer for d in layer.per_task)


@pytest.fixture(scope="module")
def two_task_bundles():
    tasks, _, fine_tuned = prepare_models(ExperimentSpec(num_tasks=2, seed=42))
    return [TaskBundle(m, t.train_inputs, t.name) for m, t in zip(fine_tuned, tasks)]


def test_report_seed42_fixtures(two_task_bundles):
    totals = {}
    for method in ("average", "regmean", "com"):
        merged = merge(two_task_bundles, MergeConfig(method=method)).merged
        report = mcs_report(two_task_bundles, merged, method, 500)
        assert report.per_layer[0].per_task == (0.0, 0.0)
        for layer in report.per_layer:
            assert layer.total == pytest.approx(sum(layer.per_task), abs=1e-9)
            assert min(layer.per_task) >= 0.0
        totals[method] = report.grand_total
    assert totals["com"] <= totals["regmean"]
    assert totals["regmean"] == pytest.approx(0.4597057866405905, abs=1e-6)
    assert totals["com"] == pytest.approx(0.44819285872267045, abs=1e-6)


def test_report_dict_shape(two_task_bundles):
    merged = merge(two_task_bundles, MergeConfig(method="com", max_samples_per_task=50)).merged
    d = mcs_report(two_task_bundles, merged, "com", 50).to_dict()
    assert list(d) == ["method_label", "task_names", "layers", "grand_total"]
    assert [layer["index"] for layer in d["layers"]] == [0, 1, 2]
    assert list(d["layers"][0]) == ["index", "name", "per_task", "total"]
