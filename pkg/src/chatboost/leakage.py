"""Target leakage lab: naive vs ordered encoding of a unique-per-row id."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .design_matrix import Column, DesignMatrix
from .target_encoding import (
    EncoderParams,
    ParameterError,
    fit_mean_encoding,
    fit_ordered_encoding,
    transform,
)


def roc_auc(scores, labels) -> float:
    """Rank-based AUC (Mann-Whitney U), ties get their average rank."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class LeakageReport:
    m: int
    seed: int
    train_auc_naive: float
    holdout_auc_naive: float
    train_auc_ordered: float
    holdout_auc_ordered: float

    def to_dict(self) -> dict:
        return asdict(self)


def leakage_demo(m: int, seed: int, lambda_fixed: float = 0.1, n_permutations: int = 4) -> LeakageReport:
    """Encode a row id against an independent coin-flip target.

    Every level holds exactly one training row, so the naive mean encoding
    reproduces the training target while carrying no information about
    held-out rows.
    """
    if m < 200:
        raise ParameterError(f"leakage demo needs m >= 200, got {m}")
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=m)
    ids = [f"row{i}" for i in range(m)]
    half = m // 2
    train = DesignMatrix((Column.categorical("row_id", ids[:half]),), y[:half])
    holdout_ids, holdout_y = ids[half:], y[half:]

    naive = fit_mean_encoding(train, "row_id")
    params = EncoderParams(lambda_fixed=lambda_fixed, n_permutations=n_permutations, seed=seed)
    ordered, ordered_train = fit_ordered_encoding(train, "row_id", params)

    return LeakageReport(
        m=m,
        seed=seed,
        train_auc_naive=roc_auc(transform(naive, train["row_id"]), train.target),
        holdout_auc_naive=roc_auc(transform(naive, holdout_ids), holdout_y),
        train_auc_ordered=roc_auc(ordered_train, train.target),
        holdout_auc_ordered=roc_auc(transform(ordered, holdout_ids), holdout_y),
    )
