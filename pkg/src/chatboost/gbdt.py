"""Gradient boosted trees for binary targets with categorical handling.

Trees are grown level by level with second-order (Newton) gains and leaf
values. Categorical columns reach the trees in one of two ways:

* ``"ctr"``: each categorical column, and every cross of up to
  ``max_ctr_complexity`` categorical columns, is ordered-target-encoded once
  before boosting starts and then split like a numeric feature;
* ``"exact"``: the trees split the raw levels into two subsets, choosing the
  best subset by sorting levels on their gradient/hessian ratio.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ._kernels import candidate_noise, partition_sorted, scan_numeric
from .design_matrix import ColumnKind, DesignMatrix
from .target_encoding import (
    EncoderParams,
    FittedEncoder,
    PermutationPlan,
    cross_columns,
    cross_name,
    fit_ordered_encoding,
    transform,
)

MODEL_FORMAT = "chatboost/model"
MODEL_VERSION = 1
MARGIN_CLIP = 30.0

# Reference hyper-parameters for full-scale runs.
REFERENCE_PARAMS = dict(
    l2_leaf_reg=64.0,
    learning_rate=0.08,
    threshold=0.167,
    depth=9,
    random_strength=0.5,
    max_ctr_complexity=2,
    od_wait=20,
    use_best_model=True,
)


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class BoostParams:
    learning_rate: float = 0.08
    depth: int = 6
    l2_leaf_reg: float = 3.0
    random_strength: float = 0.5
    od_wait: int = 20
    use_best_model: bool = True
    max_iterations: int = 500
    threshold: float = 0.167
    max_ctr_complexity: int = 1
    seed: int = 0
    min_data_in_leaf: int = 1
    categorical_mode: str = "ctr"
    ctr_lambda: float = 0.5
    ctr_permutations: int = 4

    def __post_init__(self):
        checks = [
            (self.learning_rate > 0, "learning_rate must be > 0"),
            (int(self.depth) >= 0, "depth must be >= 0"),
            (self.l2_leaf_reg >= 0, "l2_leaf_reg must be >= 0"),
            (self.random_strength >= 0, "random_strength must be >= 0"),
            (int(self.od_wait) >= 1, "od_wait must be >= 1"),
            (int(self.max_iterations) >= 1, "max_iterations must be >= 1"),
            (0 < self.threshold < 1, "threshold must lie in (0, 1)"),
            (int(self.max_ctr_complexity) >= 1, "max_ctr_complexity must be >= 1"),
            (int(self.min_data_in_leaf) >= 1, "min_data_in_leaf must be >= 1"),
            (self.categorical_mode in ("ctr", "exact"), "categorical_mode is 'ctr' or 'exact'"),
            (0 <= self.ctr_lambda <= 1, "ctr_lambda must lie in [0, 1]"),
            (int(self.ctr_permutations) >= 1, "ctr_permutations must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ValueError(message)

    @classmethod
    def reference(cls, **overrides) -> "BoostParams":
        return cls(**{**REFERENCE_PARAMS, **overrides})


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logloss(margins, targets) -> float:
    margins = np.asarray(margins, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, margins) - targets * margins))


def logistic_gradients(predictions, targets) -> tuple[np.ndarray, np.ndarray]:
    """First and second derivative of the logistic loss in the log-odds."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"predictions {p.shape} and targets {y.shape} differ")
    prob = sigmoid(p)
    return prob - y, prob * (1.0 - prob)


def leaf_value(G: float, H: float, l2_leaf_reg: float) -> float:
    denom = H + l2_leaf_reg
    return 0.0 if denom <= 0 else -G / denom


def _score(G, H, l2):
    denom = H + l2
    return np.divide(G * G, denom, out=np.zeros_like(np.asarray(G * G, dtype=np.float64)), where=denom > 0)


def partition_gain(G, H, left, l2_leaf_reg: float) -> float:
    """Second-order gain of sending the ``left`` levels one way.

    Sums are exact (``math.fsum``) and the two sides enter in a fixed order,
    so a subset and its complement get bit-identical gains.
    """
    G = np.asarray(G, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    left = np.asarray(left, dtype=bool)
    if left[0]:
        a, b = left, ~left
    else:
        a, b = ~left, left
    ga, ha = math.fsum(G[a]), math.fsum(H[a])
    gb, hb = math.fsum(G[b]), math.fsum(H[b])
    g, h = math.fsum(G), math.fsum(H)

    def term(gs, hs):
        return gs * gs / (hs + l2_leaf_reg) if hs + l2_leaf_reg > 0 else 0.0

    return (term(ga, ha) + term(gb, hb)) - term(g, h)


@dataclass(frozen=True)
class NumericSplit:
    threshold: float
    gain: float

    @property
    def is_split(self) -> bool:
        return math.isfinite(self.threshold)


@dataclass(frozen=True)
class CategoricalSplit:
    left: tuple[int, ...]
    gain: float

    @property
    def is_split(self) -> bool:
        return bool(self.left)


NO_NUMERIC_SPLIT = NumericSplit(math.nan, 0.0)
NO_CATEGORICAL_SPLIT = CategoricalSplit((), 0.0)


def _midpoint(a: float, b: float) -> float:
    mid = a + (b - a) / 2.0
    return mid if mid < b else a


def noise_scale(g: np.ndarray, h: np.ndarray, l2: float) -> float:
    """Typical gain of a chance split of a node, used to scale score noise."""
    denom = h.sum() + l2
    return float(np.dot(g, g) / denom) if denom > 0 else 0.0


def best_numeric_split(
    values,
    gradients,
    hessians,
    l2_leaf_reg: float,
    random_strength: float = 0.0,
    rng: np.random.Generator | None = None,
    min_data_in_leaf: int = 1,
) -> NumericSplit:
    """Best threshold over midpoints of the sorted distinct values.

    Rows with ``value <= threshold`` go left. With ``random_strength > 0``
    every candidate's score gets Gaussian noise of standard deviation
    ``random_strength * noise_scale(g, h)`` before the argmax; the reported
    gain is noiseless.
    """
    x = np.asarray(values, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    h = np.asarray(hessians, dtype=np.float64)
    if not x.shape == g.shape == h.shape:
        raise ShapeError("values, gradients and hessians differ in length")
    if x.size < 2:
        return NO_NUMERIC_SPLIT
    order = np.argsort(x, kind="stable")[None, :]
    noise_std, noise_seed = 0.0, 0
    if random_strength > 0:
        rng = rng if rng is not None else np.random.default_rng()
        noise_std = random_strength * noise_scale(g, h, l2_leaf_reg)
        noise_seed = int(rng.integers(2**31))
    f, cut, gain, _ = scan_numeric(
        x[None, :], order, g, h, float(l2_leaf_reg), int(min_data_in_leaf), noise_std, noise_seed
    )
    if f < 0:
        return NO_NUMERIC_SPLIT
    xs = x[order[0]]
    return NumericSplit(_midpoint(xs[cut], xs[cut + 1]), float(gain))


def _categorical_candidates(G, H, l2, counts=None, min_leaf=1):
    """Sorted-ratio scan of the levels with positive hessian.

    Returns the level order and the gain of each prefix cut (-inf if invalid).
    """
    G = np.asarray(G, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    usable = np.flatnonzero(H > 0)
    if usable.size < 2:
        return usable, np.full(0, -np.inf)
    ratio = G[usable] / H[usable]
    order = usable[np.argsort(ratio, kind="stable")]
    GL = np.cumsum(G[order])[:-1]
    HL = np.cumsum(H[order])[:-1]
    Gt, Ht = G.sum(), H.sum()
    gain = _score(GL, HL, l2) + _score(Gt - GL, Ht - HL, l2) - _score(Gt, Ht, l2)
    if counts is not None:
        c = np.asarray(counts)
        left_n = np.cumsum(c[order])[:-1]
        total = c.sum()
        gain = np.where((left_n >= min_leaf) & (total - left_n >= min_leaf), gain, -np.inf)
    return order, gain


def optimal_categorical_split(G, H, l2_leaf_reg: float) -> CategoricalSplit:
    """Best two-way partition of levels from per-level gradient sums.

    Levels are sorted by G/H and only the k-1 cuts of that order are scored;
    the second-order gain is convex in the side sums, so its maximum over all
    2^(k-1)-1 partitions sits on one of those cuts. Levels with zero hessian
    stay on the right.
    """
    G = np.asarray(G, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    if G.shape != H.shape:
        raise ShapeError("G and H differ in length")
    order, gains = _categorical_candidates(G, H, l2_leaf_reg)
    if gains.size == 0:
        return NO_CATEGORICAL_SPLIT
    # rescore every cut exactly so near-ties resolve like an exhaustive search
    best_gain, best_left = -math.inf, None
    left = np.zeros(G.size, dtype=bool)
    for cut in range(gains.size):
        left[order[cut]] = True
        gain = partition_gain(G, H, left, l2_leaf_reg)
        if gain > best_gain:
            best_gain, best_left = gain, left.copy()
    if not best_gain > 0:
        return NO_CATEGORICAL_SPLIT
    return CategoricalSplit(tuple(int(i) for i in np.flatnonzero(best_left)), best_gain)


@dataclass
class Tree:
    """Binary tree in flat arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray
    categories: list = field(default_factory=list)

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max()) if self.n_nodes else 0

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature < 0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row."""
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            nodes = node[active]
            feats = self.feature[nodes]
            x = X[active, feats]
            go_left = x <= self.threshold[nodes]
            for nid in np.unique(nodes[np.isnan(self.threshold[nodes])]):
                sel = nodes == nid
                go_left[sel] = np.isin(x[sel], self.categories[nid])
            node[active] = np.where(go_left, self.left[nodes], self.right[nodes])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": [None if math.isnan(t) else float(t) for t in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "gain": self.gain.tolist(),
            "categories": [None if c is None else [int(v) for v in c] for c in self.categories],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Tree":
        return cls(
            feature=np.asarray(doc["feature"], dtype=np.int64),
            threshold=np.asarray([math.nan if t is None else t for t in doc["threshold"]], dtype=np.float64),
            left=np.asarray(doc["left"], dtype=np.int64),
            right=np.asarray(doc["right"], dtype=np.int64),
            value=np.asarray(doc["value"], dtype=np.float64),
            gain=np.asarray(doc["gain"], dtype=np.float64),
            categories=[None if c is None else np.asarray(c, dtype=np.float64) for c in doc["categories"]],
        )


class _TreeBuilder:
    def __init__(self):
        self.feature, self.threshold, self.left, self.right = [], [], [], []
        self.value, self.gain, self.categories = [], [], []

    def add(self, value: float) -> int:
        self.feature.append(-1)
        self.threshold.append(math.nan)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        self.gain.append(0.0)
        self.categories.append(None)
        return len(self.feature) - 1

    def build(self) -> Tree:
        return Tree(
            feature=np.asarray(self.feature, dtype=np.int64),
            threshold=np.asarray(self.threshold, dtype=np.float64),
            left=np.asarray(self.left, dtype=np.int64),
            right=np.asarray(self.right, dtype=np.int64),
            value=np.asarray(self.value, dtype=np.float64),
            gain=np.asarray(self.gain, dtype=np.float64),
            categories=self.categories,
        )


def presort(X: np.ndarray, columns: Sequence[int]) -> np.ndarray:
    """Row order of each listed column, shape (len(columns), m)."""
    if len(columns) == 0:
        return np.zeros((0, X.shape[0]), dtype=np.int64)
    return np.ascontiguousarray(np.argsort(X[:, columns].T, axis=1, kind="stable"))


def _best_categorical(X, rows, g, h, cat_idx, l2, min_leaf, noise_std, noise_seed):
    best = (-np.inf, -1, None, 0.0)
    offset = X.shape[1]
    for f in cat_idx:
        codes = X[rows, f].astype(np.int64)
        k = int(codes.max()) + 1
        Gl = np.bincount(codes, weights=g[rows], minlength=k)
        Hl = np.bincount(codes, weights=h[rows], minlength=k)
        cnt = np.bincount(codes, minlength=k)
        order, gains = _categorical_candidates(Gl, Hl, l2, cnt, min_leaf)
        ok = np.flatnonzero(gains > 0)
        if ok.size == 0:
            continue
        score = gains[ok]
        if noise_std > 0:
            score = score + noise_std * np.array(
                [candidate_noise(noise_seed, offset + int(f), int(i)) for i in ok]
            )
        j = int(np.argmax(score))
        if score[j] > best[0]:
            cut = int(ok[j])
            best = (float(score[j]), int(f), np.sort(order[: cut + 1]).astype(np.float64), float(gains[cut]))
    return best


def grow_tree(
    X: np.ndarray,
    g: np.ndarray,
    h: np.ndarray,
    params: BoostParams,
    categorical: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    order: np.ndarray | None = None,
    XT: np.ndarray | None = None,
) -> tuple[Tree, np.ndarray]:
    """Grow one tree level by level; also returns the leaf of every training row.

    ``order`` and ``XT`` (numeric columns, transposed) may be passed in so
    that boosting sorts the data only once.
    """
    X = np.asarray(X, dtype=np.float64)
    m, n_features = X.shape
    if m == 0:
        raise ShapeError("cannot grow a tree on zero rows")
    if categorical is None:
        categorical = np.zeros(n_features, dtype=bool)
    num_idx = np.flatnonzero(~categorical)
    cat_idx = np.flatnonzero(categorical)
    if order is None:
        order = presort(X, num_idx)
    if XT is None:
        XT = np.ascontiguousarray(X[:, num_idx].T)
    if rng is None:
        rng = np.random.default_rng(params.seed)
    l2 = float(params.l2_leaf_reg)
    min_leaf = int(params.min_data_in_leaf)

    builder = _TreeBuilder()
    row_leaf = np.zeros(m, dtype=np.int64)
    root = builder.add(leaf_value(g.sum(), h.sum(), l2))
    frontier = [(root, order, np.arange(m))]
    in_left = np.zeros(m, dtype=np.bool_)

    for _ in range(int(params.depth)):
        next_frontier = []
        for nid, sorted_rows, rows in frontier:
            n = rows.size
            if n < 2 * min_leaf:
                continue
            noise_std, noise_seed = 0.0, 0
            if params.random_strength > 0:
                noise_std = params.random_strength * noise_scale(g[rows], h[rows], l2)
                noise_seed = int(rng.integers(2**31))

            feature, thr, cats, gain, score = -1, math.nan, None, 0.0, -np.inf
            if num_idx.size:
                f, cut, gain_n, score_n = scan_numeric(
                    XT, sorted_rows, g, h, l2, min_leaf, noise_std, noise_seed
                )
                if f >= 0:
                    lo = XT[f, sorted_rows[f, cut]]
                    hi = XT[f, sorted_rows[f, cut + 1]]
                    feature, thr, gain, score = int(num_idx[f]), _midpoint(lo, hi), float(gain_n), score_n
            if cat_idx.size:
                score_c, f_c, left_levels, gain_c = _best_categorical(
                    X, rows, g, h, cat_idx, l2, min_leaf, noise_std, noise_seed
                )
                if f_c >= 0 and score_c > score:
                    feature, thr, cats, gain = f_c, math.nan, left_levels, gain_c
            if feature < 0:
                continue

            if cats is None:
                go_left = X[rows, feature] <= thr
            else:
                go_left = np.isin(X[rows, feature], cats)
            left_rows, right_rows = rows[go_left], rows[~go_left]
            lid = builder.add(leaf_value(g[left_rows].sum(), h[left_rows].sum(), l2))
            rid = builder.add(leaf_value(g[right_rows].sum(), h[right_rows].sum(), l2))
            builder.feature[nid] = feature
            builder.threshold[nid] = thr
            builder.categories[nid] = cats
            builder.left[nid], builder.right[nid] = lid, rid
            builder.gain[nid] = gain
            builder.value[nid] = 0.0

            in_left[left_rows] = True
            s_left, s_right = partition_sorted(sorted_rows, in_left, left_rows.size)
            in_left[left_rows] = False
            row_leaf[left_rows] = lid
            row_leaf[right_rows] = rid
            next_frontier.append((lid, s_left, left_rows))
            next_frontier.append((rid, s_right, right_rows))
        frontier = next_frontier
        if not frontier:
            break

    return builder.build(), row_leaf


def build_tree(X, gradients, hessians, params: BoostParams, categorical=None, rng=None) -> Tree:
    """Grow a depth-limited tree; leaves hold ``-G / (H + l2_leaf_reg)``."""
    g = np.asarray(gradients, dtype=np.float64)
    h = np.asarray(hessians, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if not X.shape[0] == g.size == h.size:
        raise ShapeError("X, gradients and hessians differ in length")
    cat = None if categorical is None else np.asarray(categorical, dtype=bool)
    return grow_tree(X, g, h, params, cat, rng)[0]


@dataclass
class FeatureMap:
    """Turns a DesignMatrix into the float matrix seen by the trees."""

    mode: str
    numeric: list[str]
    categorical: list[str]
    crosses: list[tuple[str, ...]]
    encoders: dict[str, FittedEncoder] = field(default_factory=dict)
    dictionaries: dict[str, list[str]] = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return self.numeric + self.categorical + [cross_name(c) for c in self.crosses]

    @property
    def categorical_mask(self) -> np.ndarray:
        n_cat = len(self.categorical) + len(self.crosses)
        flag = self.mode == "exact"
        return np.array([False] * len(self.numeric) + [flag] * n_cat, dtype=bool)

    @property
    def schema(self) -> dict[str, str]:
        out = {name: ColumnKind.NUMERIC.value for name in self.numeric}
        out.update({name: ColumnKind.CATEGORICAL.value for name in self.categorical})
        return out

    @staticmethod
    def _cat_columns(dm: DesignMatrix, names, crosses):
        cols = [dm[name] for name in names]
        cols += [cross_columns([dm[c] for c in combo]) for combo in crosses]
        return cols

    @classmethod
    def fit(cls, dm: DesignMatrix, params: BoostParams) -> tuple["FeatureMap", np.ndarray]:
        import itertools

        numeric = [c.name for c in dm.columns if not c.is_categorical]
        categorical = [c.name for c in dm.columns if c.is_categorical]
        crosses = []
        for order in range(2, min(int(params.max_ctr_complexity), len(categorical)) + 1):
            crosses.extend(itertools.combinations(categorical, order))
        fmap = cls(params.categorical_mode, numeric, categorical, [tuple(c) for c in crosses])

        blocks = [dm[name].values.astype(np.float64) for name in numeric]
        cat_cols = cls._cat_columns(dm, categorical, fmap.crosses)
        if fmap.mode == "ctr":
            enc_params = EncoderParams(
                lambda_fixed=params.ctr_lambda,
                n_permutations=int(params.ctr_permutations),
                seed=int(params.seed),
            )
            plan = PermutationPlan.generate(dm.m, enc_params.n_permutations, enc_params.seed)
            for column in cat_cols:
                single = DesignMatrix((column,), dm.target)
                enc, vec = fit_ordered_encoding(single, column.name, enc_params, plan)
                fmap.encoders[column.name] = enc
                blocks.append(vec)
        else:
            for column in cat_cols:
                fmap.dictionaries[column.name] = column.levels.levels
                blocks.append(column.values.astype(np.float64))
        X = np.column_stack(blocks) if blocks else np.zeros((dm.m, 0))
        return fmap, X

    def transform(self, dm: DesignMatrix) -> np.ndarray:
        for name, kind in self.schema.items():
            if name not in dm or dm[name].kind.value != kind:
                raise ShapeError(f"column {name!r} missing or of the wrong kind")
        blocks = [dm[name].values.astype(np.float64) for name in self.numeric]
        for column in self._cat_columns(dm, self.categorical, self.crosses):
            if self.mode == "ctr":
                blocks.append(transform(self.encoders[column.name], column))
            else:
                index = {level: i for i, level in enumerate(self.dictionaries[column.name])}
                lookup = np.asarray([index.get(lv, -1) for lv in column.levels.levels], dtype=np.float64)
                blocks.append(lookup[column.values])
        return np.column_stack(blocks) if blocks else np.zeros((dm.m, 0))

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "numeric": self.numeric,
            "categorical": self.categorical,
            "crosses": [list(c) for c in self.crosses],
            "encoders": {k: v.to_dict() for k, v in self.encoders.items()},
            "dictionaries": self.dictionaries,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FeatureMap":
        return cls(
            mode=doc["mode"],
            numeric=list(doc["numeric"]),
            categorical=list(doc["categorical"]),
            crosses=[tuple(c) for c in doc["crosses"]],
            encoders={k: FittedEncoder.from_dict(v) for k, v in doc["encoders"].items()},
            dictionaries={k: list(v) for k, v in doc["dictionaries"].items()},
        )


@dataclass
class BoostModel:
    trees: list[Tree]
    base_score: float
    learning_rate: float
    best_iteration: int
    importance: dict[str, float]
    features: FeatureMap
    params: BoostParams
    history: dict[str, list[float]] = field(default_factory=dict)

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        margin = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            margin += self.learning_rate * tree.predict(X)
        return margin

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "best_iteration": self.best_iteration,
            "importance": self.importance,
            "params": asdict(self.params),
            "features": self.features.to_dict(),
            "trees": [t.to_dict() for t in self.trees],
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BoostModel":
        if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
            raise ValueError("not a supported model document")
        return cls(
            trees=[Tree.from_dict(t) for t in doc["trees"]],
            base_score=float(doc["base_score"]),
            learning_rate=float(doc["learning_rate"]),
            best_iteration=int(doc["best_iteration"]),
            importance={k: float(v) for k, v in doc["importance"].items()},
            features=FeatureMap.from_dict(doc["features"]),
            params=BoostParams(**doc["params"]),
            history={k: list(v) for k, v in doc.get("history", {}).items()},
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "BoostModel":
        return cls.from_dict(json.loads(text))


def _importance(trees: Sequence[Tree], names: Sequence[str]) -> dict[str, float]:
    totals = np.zeros(len(names))
    for tree in trees:
        inner = tree.feature >= 0
        np.add.at(totals, tree.feature[inner], tree.gain[inner])
    total = totals.sum()
    if total <= 0:
        return {}
    return {names[i]: float(totals[i] / total) for i in np.flatnonzero(totals > 0)}


def feature_importance(model: BoostModel) -> dict[str, float]:
    """Split gain per feature summed over trees, normalised to one."""
    return dict(model.importance)


def train(train_dm: DesignMatrix, valid_dm: DesignMatrix, params: BoostParams) -> BoostModel:
    """Boost trees on ``train_dm`` with early stopping on ``valid_dm`` logloss.

    Training stops once the validation loss has not strictly improved for
    ``od_wait`` iterations. With ``use_best_model`` the ensemble is cut back
    to the best validation iteration.
    """
    if train_dm.m == 0 or valid_dm.m == 0:
        raise ShapeError("train and validation sets must be non-empty")
    if train_dm.schema != valid_dm.schema:
        raise ShapeError("train and validation schemas differ")

    fmap, X = FeatureMap.fit(train_dm, params)
    X_valid = fmap.transform(valid_dm)
    y = train_dm.target.astype(np.float64)
    y_valid = valid_dm.target.astype(np.float64)
    is_cat = fmap.categorical_mask
    num_idx = np.flatnonzero(~is_cat)
    order = presort(X, num_idx)
    XT = np.ascontiguousarray(X[:, num_idx].T)
    rng = np.random.default_rng(np.uint64(int(params.seed) % 2**64))

    mean = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
    base = math.log(mean / (1 - mean))
    margin = np.full(train_dm.m, base)
    margin_valid = np.full(valid_dm.m, base)
    trees: list[Tree] = []
    history = {"train_logloss": [], "valid_logloss": []}
    best_loss, best_it = math.inf, 0

    for it in range(int(params.max_iterations)):
        g, h = logistic_gradients(margin, y)
        tree, row_leaf = grow_tree(X, g, h, params, is_cat, rng, order, XT)
        trees.append(tree)
        margin += params.learning_rate * tree.value[row_leaf]
        margin_valid += params.learning_rate * tree.predict(X_valid)
        history["train_logloss"].append(logloss(margin, y))
        loss = logloss(margin_valid, y_valid)
        history["valid_logloss"].append(loss)
        if loss < best_loss:
            best_loss, best_it = loss, it
        elif it - best_it >= int(params.od_wait):
            break

    if params.use_best_model:
        trees = trees[: best_it + 1]
    else:
        best_it = len(trees) - 1
    return BoostModel(
        trees=trees,
        base_score=base,
        learning_rate=params.learning_rate,
        best_iteration=best_it,
        importance=_importance(trees, fmap.names),
        features=fmap,
        params=params,
        history=history,
    )


def predict(model: BoostModel, rows: DesignMatrix) -> np.ndarray:
    """Subscription probabilities; unseen levels fall back to encoder priors."""
    X = model.features.transform(rows)
    margin = np.clip(model.decision_function(X), -MARGIN_CLIP, MARGIN_CLIP)
    return sigmoid(margin)
