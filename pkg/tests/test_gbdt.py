import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from chatboost._kernels import candidate_noise
from chatboost.design_matrix import Column, DesignMatrix
from chatboost.gbdt import (
    REFERENCE_PARAMS,
    BoostModel,
    BoostParams,
    ShapeError,
    best_numeric_split,
    build_tree,
    feature_importance,
    leaf_value,
    logistic_gradients,
    logloss,
    optimal_categorical_split,
    partition_gain,
    predict,
    sigmoid,
    train,
)


def brute_categorical(G, H, l2):
    k = len(G)
    best = -math.inf
    for mask in range(1, 2 ** (k - 1)):
        left = np.array([(mask >> i) & 1 for i in range(k)], dtype=bool)
        best = max(best, partition_gain(G, H, left, l2))
    return best


def brute_numeric(x, g, h, l2):
    best, thr = 0.0, None
    xs = np.unique(x)
    for a, b in zip(xs[:-1], xs[1:]):
        t = (a + b) / 2
        L = x <= t
        gain = (
            g[L].sum() ** 2 / (h[L].sum() + l2)
            + g[~L].sum() ** 2 / (h[~L].sum() + l2)
            - g.sum() ** 2 / (h.sum() + l2)
        )
        if gain > best + 1e-12:
            best, thr = gain, t
    return best, thr


# ---- gradients

def test_gradient_examples():
    g, h = logistic_gradients([0.0], [1])
    assert (g[0], h[0]) == (-0.5, 0.25)
    g, h = logistic_gradients([0.0], [0])
    assert (g[0], h[0]) == (0.5, 0.25)
    with pytest.raises(ShapeError):
        logistic_gradients([0.0, 1.0], [1])


def test_gradients_match_finite_differences(rng):
    p = rng.uniform(-6, 6, size=100)
    y = rng.integers(0, 2, size=100).astype(float)
    eps = 1e-5

    def loss(z):
        return np.logaddexp(0.0, z) - y * z

    g, h = logistic_gradients(p, y)
    g_fd = (loss(p + eps) - loss(p - eps)) / (2 * eps)
    h_fd = ((sigmoid(p + eps) - y) - (sigmoid(p - eps) - y)) / (2 * eps)
    assert np.max(np.abs(g - g_fd)) < 1e-6
    assert np.max(np.abs(h - h_fd)) < 1e-6


# ---- numeric split

def test_numeric_split_example():
    y = np.array([0, 0, 1, 1.0])
    g, h = logistic_gradients(np.zeros(4), y)
    split = best_numeric_split([1, 2, 3, 4], g, h, 1.0)
    assert 2 < split.threshold < 3
    assert split.threshold == 2.5


def test_numeric_split_constant_feature():
    split = best_numeric_split([5, 5, 5], [0.5, -0.5, 0.5], [0.25] * 3, 1.0)
    assert not split.is_split and split.gain == 0.0


def test_numeric_split_no_noise_ignores_seed():
    g, h = logistic_gradients(np.zeros(6), np.array([0, 1, 0, 1, 1, 1.0]))
    a = best_numeric_split(range(6), g, h, 1.0, 0.0, np.random.default_rng(1))
    b = best_numeric_split(range(6), g, h, 1.0, 0.0, np.random.default_rng(2))
    assert a == b


@given(st.lists(st.tuples(st.integers(0, 8), st.integers(0, 1), st.floats(-3, 3)), min_size=2, max_size=40), st.floats(0, 10))
def test_numeric_split_matches_brute_force(rows, l2):
    x = np.array([r[0] for r in rows], dtype=float)
    g, h = logistic_gradients(np.array([r[2] for r in rows]), np.array([r[1] for r in rows], dtype=float))
    split = best_numeric_split(x, g, h, l2)
    gain, _ = brute_numeric(x, g, h, l2)
    assert split.gain == pytest.approx(gain, rel=1e-9, abs=1e-12)


def test_noise_is_standard_normal():
    from scipy import stats

    z = np.array([candidate_noise(99, f, i) for f in range(20) for i in range(500)])
    assert abs(z.mean()) < 0.05 and abs(z.std() - 1) < 0.05
    assert stats.kstest(z, "norm").pvalue > 0.001
    assert np.max(np.abs(z)) < 8.7


def test_noise_changes_choice_sometimes():
    rng = np.random.default_rng(0)
    x = rng.normal(size=200)
    g, h = logistic_gradients(np.zeros(200), (rng.random(200) < 0.5).astype(float))
    plain = best_numeric_split(x, g, h, 1.0)
    noisy = {best_numeric_split(x, g, h, 1.0, 5.0, np.random.default_rng(s)).threshold for s in range(10)}
    assert len(noisy) > 1
    assert all(np.isfinite(t) for t in noisy) and np.isfinite(plain.threshold)


# ---- categorical split

def test_categorical_two_levels():
    G, H = np.array([1.5, -2.0]), np.array([1.0, 2.0])
    split = optimal_categorical_split(G, H, 1.0)
    direct = 1.5**2 / 2 + 2.0**2 / 3 - 0.5**2 / 4
    assert split.gain == pytest.approx(direct)


def test_categorical_identical_levels_no_split():
    split = optimal_categorical_split(np.full(5, 0.3), np.full(5, 1.2), 2.0)
    assert not split.is_split


def test_categorical_single_level_no_split():
    assert not optimal_categorical_split(np.array([1.0]), np.array([1.0]), 1.0).is_split


@pytest.mark.parametrize("k", [2, 5, 9, 12])
def test_categorical_matches_brute_force(k, rng):
    for _ in range(10):
        G = rng.normal(size=k) * rng.uniform(0.1, 10)
        H = rng.uniform(0.01, 5, size=k)
        l2 = float(rng.choice([0.0, 1.0, 64.0]))
        split = optimal_categorical_split(G, H, l2)
        best = brute_categorical(G, H, l2)
        if best > 0:
            assert split.gain == best
        else:
            # with l2 > 0 every partition can lose gain
            assert not split.is_split


# ---- trees

def test_depth_one_tree_leaves():
    y = np.array([0, 0, 1, 1.0])
    g, h = logistic_gradients(np.zeros(4), y)
    params = BoostParams(depth=1, l2_leaf_reg=1.0, random_strength=0.0)
    tree = build_tree(np.array([1, 2, 3, 4.0]), g, h, params)
    assert tree.n_nodes == 3
    assert tree.threshold[0] == 2.5
    left, right = tree.left[0], tree.right[0]
    assert tree.value[left] == leaf_value(g[:2].sum(), h[:2].sum(), 1.0) == -1.0 / 1.5
    assert tree.value[right] == pytest.approx(1.0 / 1.5)


def test_depth_zero_is_newton_step():
    y = np.array([1, 1, 0, 1.0])
    g, h = logistic_gradients(np.zeros(4), y)
    tree = build_tree(np.zeros((4, 1)), g, h, BoostParams(depth=0, l2_leaf_reg=2.0))
    assert tree.n_nodes == 1
    assert tree.value[0] == -g.sum() / (h.sum() + 2.0)


def test_pure_node_moves_toward_class():
    g, h = logistic_gradients(np.zeros(3), np.ones(3))
    tree = build_tree(np.zeros((3, 1)), g, h, BoostParams(depth=2))
    assert np.all(tree.value > 0)


@given(st.integers(0, 2**20), st.floats(0, 20), st.floats(0, 20))
def test_larger_l2_shrinks_leaves(seed, a, b):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(60, 3))
    g, h = logistic_gradients(rng.normal(size=60), (rng.random(60) < 0.4).astype(float))
    lo, hi = sorted([a, b])
    t_lo = build_tree(X, g, h, BoostParams(depth=2, l2_leaf_reg=lo, random_strength=0))
    t_hi = build_tree(X, g, h, BoostParams(depth=2, l2_leaf_reg=hi, random_strength=0))
    # same rows, larger denominator
    rows_lo = t_lo.apply(X)
    for leaf in t_lo.leaves():
        idx = rows_lo == leaf
        assert abs(leaf_value(g[idx].sum(), h[idx].sum(), hi)) <= abs(t_lo.value[leaf]) + 1e-15
    assert t_hi.depth <= 2


def test_exact_categorical_tree_splits_levels():
    codes = np.array([0, 1, 2, 3] * 10, dtype=float)
    y = np.isin(codes, [1, 3]).astype(float)
    g, h = logistic_gradients(np.zeros(40), y)
    tree = build_tree(codes[:, None], g, h, BoostParams(depth=1, random_strength=0), categorical=[True])
    assert sorted(tree.categories[0].tolist()) in ([0.0, 2.0], [1.0, 3.0])
    pred = tree.predict(codes[:, None])
    assert np.all((pred > 0) == (y == 1))


# ---- boosting

def separable(n=200, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=n)
    b = rng.normal(size=n)
    y = (a + b > 0).astype(int)
    return DesignMatrix((Column.numeric("a", a), Column.numeric("b", b)), y)


def test_training_loss_decreases_on_separable_data():
    dm = separable()
    model = train(dm, separable(seed=1), BoostParams(depth=3, random_strength=0, max_iterations=40, l2_leaf_reg=1.0))
    losses = model.history["train_logloss"]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    probs = predict(model, dm)
    assert np.mean((probs > 0.5) == (dm.target == 1)) > 0.97


def test_valid_equals_train_runs_to_the_end():
    dm = separable()
    params = BoostParams(depth=3, random_strength=0, max_iterations=30, od_wait=5)
    model = train(dm, dm, params)
    assert model.best_iteration == 29
    assert len(model.trees) == 30


def test_max_iterations_one():
    dm = separable()
    model = train(dm, dm, BoostParams(max_iterations=1))
    assert len(model.trees) == 1


def test_zero_trees_predicts_base_rate():
    dm = separable()
    model = train(dm, dm, BoostParams(max_iterations=1))
    model.trees = []
    assert np.allclose(predict(model, dm), dm.target.mean())


def test_best_model_has_lowest_retained_valid_loss():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(300, 4))
    y = (rng.random(300) < sigmoid(X[:, 0])).astype(int)
    cols = tuple(Column.numeric(f"x{i}", X[:, i]) for i in range(4))
    dm = DesignMatrix(cols, y)
    params = BoostParams(depth=4, learning_rate=0.3, od_wait=5, max_iterations=200, random_strength=0)
    model = train(dm.take(np.arange(200)), dm.take(np.arange(200, 300)), params)
    valid = model.history["valid_logloss"]
    assert len(valid) - 1 - model.best_iteration == 5
    assert len(model.trees) == model.best_iteration + 1
    assert all(valid[model.best_iteration] <= v for v in valid[: model.best_iteration + 1])


def test_noise_free_training_is_deterministic():
    dm = separable()
    params = BoostParams(depth=3, random_strength=0, max_iterations=10)
    a = train(dm, dm, params)
    b = train(dm, dm, BoostParams(**{**params.__dict__, "seed": 77}))
    assert a.to_json().replace('"seed": 0', "") == b.to_json().replace('"seed": 77', "")


def test_seeded_noise_training_is_deterministic():
    dm = separable()
    params = BoostParams(depth=3, random_strength=1.0, max_iterations=10, seed=4)
    assert train(dm, dm, params).to_json() == train(dm, dm, params).to_json()


def test_schema_mismatch():
    dm = separable()
    with pytest.raises(ShapeError):
        train(dm, dm.select(["a"]), BoostParams())


def categorical_data(mode, seed=0, n=600):
    rng = np.random.default_rng(seed)
    users = rng.integers(0, 30, size=n)
    games = rng.integers(0, 4, size=n)
    logit = np.where(users % 3 == 0, 1.5, -1.5) + 0.5 * (games == 1)
    y = (rng.random(n) < sigmoid(logit)).astype(int)
    cols = (
        Column.categorical("uid", [f"u{u}" for u in users]),
        Column.categorical("game", [f"g{g}" for g in games]),
        Column.numeric("noise", rng.normal(size=n)),
    )
    return DesignMatrix(cols, y)


@pytest.mark.parametrize("mode", ["ctr", "exact"])
def test_categorical_modes_learn_and_round_trip(mode):
    dm = categorical_data(mode)
    params = BoostParams(depth=3, max_iterations=60, categorical_mode=mode, max_ctr_complexity=2, learning_rate=0.2)
    model = train(dm.take(np.arange(400)), dm.take(np.arange(400, 600)), params)
    test = dm.take(np.arange(400, 600))
    probs = predict(model, test)
    assert np.all((probs > 0) & (probs < 1))
    from chatboost.leakage import roc_auc

    # exact level subsets overfit a 30-level id faster than ordered encodings
    assert roc_auc(probs, test.target) > (0.75 if mode == "ctr" else 0.6)
    again = BoostModel.from_json(model.to_json())
    np.testing.assert_array_equal(predict(again, test), probs)
    assert again.to_json() == model.to_json()
    if mode == "ctr":
        assert "uid⊗game" in model.features.names


def test_unseen_levels_predict_without_error():
    dm = categorical_data("ctr")
    for mode in ("ctr", "exact"):
        model = train(dm, dm, BoostParams(depth=2, max_iterations=5, categorical_mode=mode))
        new = DesignMatrix(
            (Column.categorical("uid", ["nobody"]), Column.categorical("game", ["g9"]), Column.numeric("noise", [0.0])),
            np.array([0]),
        )
        p = predict(model, new)
        assert 0 < p[0] < 1


def test_importance_examples():
    rng = np.random.default_rng(1)
    a = rng.normal(size=300)
    dm = DesignMatrix((Column.numeric("a", a), Column.numeric("c", np.zeros(300))), (a > 0).astype(int))
    model = train(dm, dm, BoostParams(depth=2, max_iterations=5))
    assert feature_importance(model) == {"a": 1.0}
    flat = train(
        DesignMatrix((Column.numeric("c", np.zeros(4)),), np.array([0, 1, 0, 1])),
        DesignMatrix((Column.numeric("c", np.zeros(4)),), np.array([0, 1, 0, 1])),
        BoostParams(max_iterations=2),
    )
    assert feature_importance(flat) == {}


def test_importance_symmetric_features():
    a = np.array([0, 0, 1, 1.0] * 25)
    dm = DesignMatrix((Column.numeric("f1", a), Column.numeric("f2", a.copy())), a.astype(int))
    model = train(dm, dm, BoostParams(depth=1, max_iterations=1, random_strength=0))
    imp = feature_importance(model)
    assert sum(imp.values()) == pytest.approx(1.0)
    assert imp in ({"f1": 1.0}, {"f2": 1.0})


def test_importance_two_equal_features():
    from chatboost.gbdt import Tree, _importance

    tree = Tree(
        feature=np.array([0, 1, -1, -1, -1]),
        threshold=np.array([0.5, 0.5, np.nan, np.nan, np.nan]),
        left=np.array([1, 3, -1, -1, -1]),
        right=np.array([2, 4, -1, -1, -1]),
        value=np.zeros(5),
        gain=np.array([2.0, 2.0, 0, 0, 0]),
        categories=[None] * 5,
    )
    assert _importance([tree], ["f1", "f2"]) == {"f1": 0.5, "f2": 0.5}


def test_reference_params():
    p = BoostParams.reference()
    assert (p.l2_leaf_reg, p.learning_rate, p.threshold, p.depth) == (64, 0.08, 0.167, 9)
    assert (p.random_strength, p.max_ctr_complexity, p.od_wait, p.use_best_model) == (0.5, 2, 20, True)
    assert REFERENCE_PARAMS["od_wait"] == 20


@pytest.mark.parametrize(
    "bad",
    [dict(learning_rate=0), dict(l2_leaf_reg=-1), dict(random_strength=-0.1), dict(od_wait=0),
     dict(max_iterations=0), dict(threshold=1.0), dict(max_ctr_complexity=0), dict(categorical_mode="x")],
)
def test_params_validated(bad):
    with pytest.raises(ValueError):
        BoostParams(**bad)


def test_logloss_matches_definition():
    z = np.array([-2.0, 0.0, 3.0])
    y = np.array([0, 1, 1.0])
    p = sigmoid(z)
    want = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert logloss(z, y) == pytest.approx(want, rel=1e-12)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
def test_probabilities_strictly_inside(z):
    dm = separable()
    model = train(dm, dm, BoostParams(max_iterations=1))
    model.trees = []
    model.base_score = float(z[0])
    p = predict(model, dm)
    assert np.all((p > 0) & (p < 1))
