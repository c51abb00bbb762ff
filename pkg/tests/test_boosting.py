import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pulsegate import boosting as B
from pulsegate.errors import BadSpec, ChecksumMismatch, SingleClass

FOUR_X = np.array([[1.0], [2.0], [3.0], [4.0]])
FOUR_Y = np.array([0, 0, 1, 1])


def four_point_model():
    return B.fit_arrays(FOUR_X, FOUR_Y, B.GbdtParams(num_leaves=2, max_bin=255, learning_rate=1.0, n_trees=1))


def random_task(seed, n=200, d=12):
    rng = np.random.default_rng(seed)
    X = rng.normal(80, 15, (n, d))
    logit = (X[:, -1] - 80) / 8 + rng.normal(0, 1, n)
    return X, (logit > 0.5).astype(int)


def test_bins_examples():
    assert np.array_equal(B.build_bins(np.arange(1, 9.0), 4)[0], [2.5, 4.5, 6.5])
    assert len(B.build_bins(np.full((10, 1), 3.0), 8)[0]) == 0
    assert np.array_equal(B.build_bins(np.array([1.0, 1.0, 2.0, 5.0]), 10)[0], [1.5, 3.5])


@given(st.lists(st.floats(0, 300), min_size=1, max_size=200), st.integers(2, 64))
def test_bins_bounded_and_ascending(values, max_bin):
    cuts = B.build_bins(np.array(values), max_bin)[0]
    assert len(cuts) <= max_bin - 1
    assert np.all(np.diff(cuts) > 0)


def test_four_point_newton_step():
    m = four_point_model()
    tree = m.trees[0]
    assert tree.threshold[0] == 2.5 and tree.n_leaves == 2
    assert sorted(v for f, v in zip(tree.feature, tree.value) if f < 0) == pytest.approx([-2.0, 2.0])
    p = B.predict_proba(m, FOUR_X)
    assert p == pytest.approx([0.1192, 0.1192, 0.8808, 0.8808], abs=1e-4)
    assert B.predict_gbdt(m, [1.0]) == pytest.approx(0.119, abs=1e-3)


def test_zero_learning_rate_and_zero_trees_give_base_rate():
    X, y = random_task(0)
    for params in (B.GbdtParams(8, 32, 0.0, 5), B.GbdtParams(8, 32, 0.1, 0)):
        m = B.fit_arrays(X, y, params)
        assert np.allclose(B.predict_proba(m, X), y.mean())


def test_pure_region_sign():
    X = np.array([[1.0], [2.0], [10.0], [11.0], [12.0]])
    m = B.fit_arrays(X, np.array([1, 1, 0, 0, 0]), B.GbdtParams(2, 16, 0.5, 1))
    raw = B.predict_raw(m, X)
    assert raw[0] > m.init_score and raw[-1] < m.init_score


def test_single_class_and_bad_params():
    with pytest.raises(SingleClass):
        B.fit_arrays(FOUR_X, np.zeros(4), B.GbdtParams())
    with pytest.raises(BadSpec):
        B.GbdtParams(num_leaves=1)
    with pytest.raises(BadSpec):
        B.GbdtParams(learning_rate=1.5)


def _gain(g, h, mask):
    def score(m):
        return g[m].sum() ** 2 / h[m].sum()
    return score(mask) + score(~mask) - score(np.ones_like(mask))


@settings(max_examples=64)
@given(st.integers(0, 2**32 - 1), st.integers(4, 64))
def test_split_matches_brute_force(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 1, n).round(2)
    y = (x + rng.normal(0, 1, n) > 0).astype(int)
    if y.min() == y.max() or len(np.unique(x)) < 2:
        return
    m = B.fit_arrays(x[:, None], y, B.GbdtParams(2, 255, 1.0, 1))
    p = np.full(n, y.mean())
    g, h = p - y, p * (1 - p)
    u = np.unique(x)
    best = max(_gain(g, h, x <= t) for t in (u[:-1] + u[1:]) / 2)
    tree = m.trees[0]
    if tree.n_leaves == 1:
        assert best <= 1e-12
    else:
        assert _gain(g, h, x <= tree.threshold[0]) == pytest.approx(best, rel=1e-9, abs=1e-12)


def test_training_loss_monotone_and_leaf_bound():
    X, y = random_task(1)
    m = B.fit_arrays(X, y, B.GbdtParams(num_leaves=7, max_bin=32, learning_rate=0.3, n_trees=30))
    assert all(b <= a + 1e-12 for a, b in zip(m.train_log, m.train_log[1:]))
    assert all(t.n_leaves <= 7 for t in m.trees)
    assert max(t.n_leaves for t in m.trees) == 7


def test_row_order_invariance():
    X, y = random_task(2)
    perm = np.random.default_rng(0).permutation(len(y))
    params = B.GbdtParams(num_leaves=9, max_bin=40, learning_rate=0.2, n_trees=15)
    a, b = B.fit_arrays(X, y, params), B.fit_arrays(X[perm], y[perm], params)
    Xt = random_task(3, 50)[0]
    assert np.array_equal(B.predict_proba(a, Xt), B.predict_proba(b, Xt))


def test_single_row_fast_path_matches_batch():
    X, y = random_task(4)
    m = B.fit_arrays(X, y, B.GbdtParams(num_leaves=15, max_bin=64, learning_rate=0.2, n_trees=20))
    batch = B.predict_raw(m, X[:40])
    assert np.array_equal(batch, [B.predict_raw(m, X[i])[0] for i in range(40)])
    assert np.array_equal(batch[:3], B.predict_raw(m, X[:3]))


@pytest.mark.parametrize("n_trees", [0, 1, 12])
def test_round_trip(n_trees):
    X, y = random_task(5)
    m = B.fit_arrays(X, y, B.GbdtParams(num_leaves=6, max_bin=20, learning_rate=0.2, n_trees=n_trees), horizon_hours=4)
    back = B.deserialize_gbdt(B.serialize_gbdt(m))
    assert np.array_equal(B.predict_proba(m, X), B.predict_proba(back, X))
    assert back.horizon_hours == 4 and back.params == m.params


def test_corrupted_payload():
    blob = bytearray(B.serialize_gbdt(four_point_model()))
    blob[-8] ^= 0xFF
    with pytest.raises(ChecksumMismatch):
        B.deserialize_gbdt(bytes(blob))
