"""Target encodings for categorical columns.

Three target encodings share one fitted representation, a level -> real map
with a prior used for unseen levels:

* mean: the per-level mean target,
* smoothed ("EB"): the level mean shrunk towards the prior with a sigmoid
  weight in the level count,
* ordered: rows are visited in random permutations and each row is encoded
  from the rows before it only, then averaged over permutations.

One-hot and hashing encoders are provided for completeness, together with
categorical crosses (tuples of levels) used for feature interactions.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .design_matrix import (
    Column,
    ColumnKind,
    DesignMatrix,
    EmptyDataError,
    LevelDictionary,
    SchemaError,
    global_mean,
)

ENCODER_FORMAT = "chatboost/encoder"
ENCODER_VERSION = 1
CROSS_SEP = "⊗"


class ParameterError(ValueError):
    pass


class CardinalityError(ValueError):
    pass


class EncoderKind(str, Enum):
    MEAN = "mean"
    EB = "eb"
    ORDERED = "ordered"
    ONE_HOT = "one_hot"
    HASH = "hash"


@dataclass(frozen=True)
class EncoderParams:
    """Hyper-parameters shared by the encoders.

    ``l`` and ``sigma`` are the center and steepness of the count weight of the
    smoothed encoding; ``lambda_fixed`` is the constant weight of the ordered
    encoding. ``prior`` overrides the data mean as shrinkage target when set.
    """

    l: float = 20.0
    sigma: float = 10.0
    lambda_fixed: float = 0.5
    n_permutations: int = 4
    seed: int = 0
    hash_dims: int = 64
    one_hot_max_cardinality: int = 16
    prior: float | None = None

    def __post_init__(self):
        if not math.isfinite(self.l):
            raise ParameterError("l must be finite")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ParameterError(f"sigma must be > 0, got {self.sigma}")
        if not 0.0 <= self.lambda_fixed <= 1.0:
            raise ParameterError(f"lambda_fixed must lie in [0, 1], got {self.lambda_fixed}")
        if int(self.n_permutations) < 1:
            raise ParameterError(f"n_permutations must be >= 1, got {self.n_permutations}")
        if int(self.hash_dims) < 1:
            raise ParameterError(f"hash_dims must be >= 1, got {self.hash_dims}")
        if int(self.one_hot_max_cardinality) < 1:
            raise ParameterError("one_hot_max_cardinality must be >= 1")
        if self.prior is not None and not 0.0 <= self.prior <= 1.0:
            raise ParameterError(f"prior must lie in [0, 1], got {self.prior}")
        if not -(2**63) <= int(self.seed) < 2**64:
            raise ParameterError("seed must fit in 64 bits")


@dataclass(frozen=True)
class PermutationPlan:
    permutations: tuple[np.ndarray, ...]
    seed: int | None = None

    def __post_init__(self):
        perms = []
        for perm in self.permutations:
            perm = np.asarray(perm, dtype=np.int64)
            m = perm.size
            if not np.array_equal(np.sort(perm), np.arange(m)):
                raise ParameterError("every ordering must be a permutation of the row indices")
            perm.setflags(write=False)
            perms.append(perm)
        if not perms:
            raise ParameterError("a permutation plan needs at least one ordering")
        if len({p.size for p in perms}) != 1:
            raise ParameterError("orderings have different lengths")
        object.__setattr__(self, "permutations", tuple(perms))

    @classmethod
    def generate(cls, m: int, n_permutations: int, seed: int) -> "PermutationPlan":
        # Generator.permutation is a seeded Fisher-Yates shuffle
        rng = np.random.default_rng(np.uint64(seed % 2**64))
        return cls(tuple(rng.permutation(m) for _ in range(n_permutations)), seed)

    def reversed(self) -> "PermutationPlan":
        return PermutationPlan(self.permutations[::-1], self.seed)

    def __len__(self) -> int:
        return len(self.permutations)


@dataclass(frozen=True)
class FittedEncoder:
    kind: EncoderKind
    column: str
    prior: float
    params: EncoderParams
    mapping: Mapping[str, float] = field(default_factory=dict)
    levels: tuple[str, ...] = ()

    def value(self, level: str) -> float:
        return self.mapping.get(level, self.prior)

    @property
    def width(self) -> int:
        """Number of output columns produced by :func:`transform`."""
        if self.kind is EncoderKind.ONE_HOT:
            return len(self.levels)
        if self.kind is EncoderKind.HASH:
            return int(self.params.hash_dims)
        return 1

    def bucket(self, level: str) -> int:
        if self.kind is not EncoderKind.HASH:
            raise TypeError("bucket() is only defined for hash encoders")
        return hash_bucket(level, self.params.hash_dims, self.params.seed)

    def to_dict(self) -> dict:
        doc = {
            "format": ENCODER_FORMAT,
            "version": ENCODER_VERSION,
            "kind": self.kind.value,
            "column": self.column,
            "prior": self.prior,
            "params": asdict(self.params),
        }
        if self.kind is EncoderKind.ONE_HOT:
            doc["levels"] = list(self.levels)
        elif self.kind is not EncoderKind.HASH:
            doc["mapping"] = dict(self.mapping)
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping) -> "FittedEncoder":
        if doc.get("format") != ENCODER_FORMAT:
            raise ValueError(f"not an encoder document: {doc.get('format')!r}")
        if doc.get("version") != ENCODER_VERSION:
            raise ValueError(f"unsupported encoder version {doc.get('version')!r}")
        return cls(
            kind=EncoderKind(doc["kind"]),
            column=doc["column"],
            prior=float(doc["prior"]),
            params=EncoderParams(**doc["params"]),
            mapping={str(k): float(v) for k, v in doc.get("mapping", {}).items()},
            levels=tuple(doc.get("levels", ())),
        )

    def to_json(self) -> str:
        # json writes floats with repr(), the shortest string that round-trips
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "FittedEncoder":
        return cls.from_dict(json.loads(text))


def count_weight(n, l: float, sigma: float):
    """S-shaped weight in the level count, 0.5 at ``n == l``."""
    n = np.asarray(n, dtype=np.float64)
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-(n - l) / sigma))


def shrink(level_mean, prior: float, weight):
    """``weight * level_mean + (1 - weight) * prior``, kept between the two."""
    level_mean = np.asarray(level_mean, dtype=np.float64)
    out = prior + weight * (level_mean - prior)
    return np.clip(out, np.minimum(level_mean, prior), np.maximum(level_mean, prior))


def _level_stats(dm: DesignMatrix, col: str) -> tuple[Column, np.ndarray, np.ndarray]:
    column = dm.categorical(col)
    if dm.m == 0:
        raise EmptyDataError(f"cannot fit an encoding of {col!r} on zero rows")
    counts = np.bincount(column.values, minlength=column.levels.k)
    sums = np.bincount(column.values, weights=dm.target.astype(np.float64), minlength=column.levels.k)
    return column, counts, sums


def _prior(dm: DesignMatrix, params: EncoderParams | None) -> float:
    if params is not None and params.prior is not None:
        return float(params.prior)
    return global_mean(dm)


def fit_mean_encoding(dm: DesignMatrix, col: str, params: EncoderParams | None = None) -> FittedEncoder:
    column, counts, sums = _level_stats(dm, col)
    mapping = {
        level: float(s) / int(c)
        for level, c, s in zip(column.levels.levels, counts, sums)
        if c > 0
    }
    return FittedEncoder(EncoderKind.MEAN, col, _prior(dm, params), params or EncoderParams(), mapping)


def fit_eb_encoding(dm: DesignMatrix, col: str, params: EncoderParams) -> FittedEncoder:
    column, counts, sums = _level_stats(dm, col)
    prior = _prior(dm, params)
    seen = counts > 0
    means = np.divide(sums, counts, out=np.full(counts.shape, prior), where=seen)
    values = shrink(means, prior, count_weight(counts, params.l, params.sigma))
    mapping = {
        level: float(v) for level, v, s in zip(column.levels.levels, values, seen) if s
    }
    return FittedEncoder(EncoderKind.EB, col, prior, params, mapping)


def _prefix_encode(codes: np.ndarray, y: np.ndarray, order: np.ndarray, lam: float, prior: float) -> np.ndarray:
    m = codes.size
    c = codes[order]
    t = y[order]
    # stable sort groups rows by level while keeping permutation order inside a group
    idx = np.argsort(c, kind="stable")
    cs = c[idx]
    ts = t[idx]
    pos = np.arange(m)
    starts = np.ones(m, dtype=bool)
    starts[1:] = cs[1:] != cs[:-1]
    group_start = np.maximum.accumulate(np.where(starts, pos, 0))
    csum = np.cumsum(ts)
    seen = pos - group_start
    before = csum - ts - (csum[group_start] - ts[group_start])
    prefix_mean = np.divide(before, seen, out=np.full(m, prior), where=seen > 0)
    values = shrink(prefix_mean, prior, lam)
    out = np.empty(m)
    out[order[idx]] = values
    return out


def ordered_training_vector(
    codes: np.ndarray, y: np.ndarray, plan: PermutationPlan, lam: float, prior: float
) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    y = np.asarray(y, dtype=np.float64)
    per_perm = np.stack([_prefix_encode(codes, y, p, lam, prior) for p in plan.permutations])
    # sorting before summing makes the average independent of the plan's order
    per_perm.sort(axis=0)
    return per_perm.sum(axis=0) / len(plan)


def fit_ordered_encoding(
    dm: DesignMatrix,
    col: str,
    params: EncoderParams,
    plan: PermutationPlan | None = None,
) -> tuple[FittedEncoder, np.ndarray]:
    """Fit the ordered (permutation prefix) encoding.

    Returns the encoder used at inference, whose values come from all
    training rows, and the leakage-free vector for the training rows
    themselves, averaged over the permutations of ``plan``.
    """
    column, counts, sums = _level_stats(dm, col)
    prior = _prior(dm, params)
    if plan is None:
        plan = PermutationPlan.generate(dm.m, params.n_permutations, params.seed)
    elif plan.permutations[0].size != dm.m:
        raise ParameterError("permutation plan does not match the number of rows")
    lam = params.lambda_fixed
    train_vec = ordered_training_vector(column.values, dm.target, plan, lam, prior)

    seen = counts > 0
    means = np.divide(sums, counts, out=np.full(counts.shape, prior), where=seen)
    values = shrink(means, prior, lam)
    mapping = {level: float(v) for level, v, s in zip(column.levels.levels, values, seen) if s}
    return FittedEncoder(EncoderKind.ORDERED, col, prior, params, mapping), train_vec


def hash_bucket(level: str, hash_dims: int, seed: int) -> int:
    key = (int(seed) % 2**64).to_bytes(8, "little")
    digest = hashlib.blake2b(level.encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little") % int(hash_dims)


def one_hot_encode(dm: DesignMatrix, col: str, params: EncoderParams) -> FittedEncoder:
    column = dm.categorical(col)
    k = column.levels.k
    if k > params.one_hot_max_cardinality:
        raise CardinalityError(
            f"column {col!r} has {k} levels, above one_hot_max_cardinality="
            f"{params.one_hot_max_cardinality}; use hash_encode or a target encoding"
        )
    return FittedEncoder(EncoderKind.ONE_HOT, col, 0.0, params, levels=tuple(column.levels.levels))


def hash_encode(dm: DesignMatrix, col: str, params: EncoderParams) -> FittedEncoder:
    dm.categorical(col)
    return FittedEncoder(EncoderKind.HASH, col, 0.0, params)


def _as_levels(values) -> tuple[list[str], np.ndarray]:
    """Distinct level strings and per-row indices into them."""
    if isinstance(values, Column):
        if not values.is_categorical:
            raise SchemaError(f"column {values.name!r} is numeric")
        return values.levels.levels, values.values
    dictionary, codes = LevelDictionary.encode(values)
    return dictionary.levels, codes


def transform(enc: FittedEncoder, values: Column | Iterable[str]) -> np.ndarray:
    """Encode a categorical column; unseen levels never raise.

    Returns a vector for the target encodings and an (m, width) indicator
    block for one-hot and hash encoders.
    """
    levels, codes = _as_levels(values)
    if enc.kind is EncoderKind.ONE_HOT:
        index = {level: i for i, level in enumerate(enc.levels)}
        pos = np.asarray([index.get(level, -1) for level in levels], dtype=np.int64)
        block = np.zeros((codes.size, enc.width))
        rows = np.flatnonzero(pos[codes] >= 0) if codes.size else np.zeros(0, dtype=np.int64)
        block[rows, pos[codes][rows]] = 1.0
        return block
    if enc.kind is EncoderKind.HASH:
        buckets = np.asarray([enc.bucket(level) for level in levels], dtype=np.int64)
        block = np.zeros((codes.size, enc.width))
        block[np.arange(codes.size), buckets[codes]] = 1.0
        return block
    table = np.asarray([enc.value(level) for level in levels], dtype=np.float64)
    return table[codes]


def cross_name(cols: Sequence[str]) -> str:
    return CROSS_SEP.join(cols)


def cross_columns(columns: Sequence[Column]) -> Column:
    """Categorical column whose level is the tuple of the members' levels."""
    m = len(columns[0])
    if math.prod(max(c.levels.k, 1) for c in columns) < 2**62:
        combined = np.zeros(m, dtype=np.int64)
        for column in columns:
            combined = combined * column.levels.k + column.values
        uniq, first, inverse = np.unique(combined, return_index=True, return_inverse=True)
    else:
        stacked = np.stack([c.values for c in columns], axis=1)
        uniq, first, inverse = np.unique(stacked, axis=0, return_index=True, return_inverse=True)
    # renumber in first-appearance order
    rank = np.empty(uniq.size, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(uniq.size)
    codes = rank[inverse.reshape(-1)]
    first_rows = np.sort(first)
    levels = LevelDictionary(
        CROSS_SEP.join(c.levels.level(int(c.values[r])) for c in columns) for r in first_rows
    )
    return Column(cross_name([c.name for c in columns]), ColumnKind.CATEGORICAL, codes, levels)


def cross_categoricals(dm: DesignMatrix, cols: Sequence[str], max_order: int) -> list[Column]:
    """All crosses of 2..max_order distinct columns out of ``cols``."""
    if len(set(cols)) != len(cols):
        raise SchemaError(f"duplicate column names in {list(cols)}")
    members = [dm.categorical(c) for c in cols]
    if not 2 <= max_order <= len(cols):
        raise ParameterError(f"max_order must lie in [2, {len(cols)}], got {max_order}")
    out = []
    for order in range(2, max_order + 1):
        for combo in itertools.combinations(members, order):
            out.append(cross_columns(combo))
    return out


def cross_strings(parts: Sequence[Sequence[str]]) -> list[str]:
    """Row-wise cross of level strings, matching :func:`cross_columns` levels."""
    return [CROSS_SEP.join(row) for row in zip(*parts)]
