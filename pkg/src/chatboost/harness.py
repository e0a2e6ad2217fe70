"""End-to-end runs: featurize a synthetic log, split, train, evaluate."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .chat_features import TOP_FEATURES, PairRecord, all_feature_columns, build_pair_records, design_matrix
from .experiment import (
    GROUPS,
    EvalReport,
    GeneratorConfig,
    GroupSpec,
    RunSummary,
    SignalSpec,
    SplitPlan,
    Splits,
    f1_score,
    generate_synthetic_log,
    split_records,
    subsample_training,
)
from .gbdt import BoostModel, BoostParams, feature_importance, predict, train


def resolve_features(selector: str | Sequence[str]) -> list[str]:
    """``"all"``, ``"top"`` or an explicit list of feature names."""
    if isinstance(selector, str):
        if selector == "all":
            return all_feature_columns()
        if selector == "top":
            return list(TOP_FEATURES)
        raise ValueError(f"unknown feature selector {selector!r}; use 'all', 'top' or a list")
    names = list(selector)
    unknown = sorted(set(names) - set(all_feature_columns()))
    if unknown:
        raise ValueError(f"unknown features: {unknown}")
    return names


def feature_label(selector: str | Sequence[str]) -> str:
    return selector if isinstance(selector, str) else f"{len(list(selector))} cols"


@dataclass
class RunResult:
    model: BoostModel
    report: EvalReport
    summary: RunSummary
    probabilities: np.ndarray


def fit_and_evaluate(
    splits: Splits,
    params: BoostParams,
    features: str | Sequence[str] = "top",
    max_per_group: int | None = None,
) -> RunResult:
    """Train on (subsampled) ``splits.train``, stop early on ``splits.valid``, score ``splits.test``."""
    names = resolve_features(features)
    train_records = subsample_training(splits.train, max_per_group, params.seed)
    model = train(design_matrix(train_records, names), design_matrix(splits.valid, names), params)
    test_dm = design_matrix(splits.test, names)
    probs = predict(model, test_dm)
    report = f1_score(probs, test_dm.target, params.threshold, [r.group for r in splits.test])
    report.extra = {
        "best_iteration": model.best_iteration,
        "n_trees": len(model.trees),
        "train_rows": len(train_records),
        "valid_rows": len(splits.valid),
        "test_rows": len(splits.test),
    }
    summary = RunSummary(
        f1_test=report.overall_f1,
        train_rows=len(train_records),
        features=feature_label(features),
        max_ctr_complexity=params.max_ctr_complexity,
        learning_rate=params.learning_rate,
    )
    return RunResult(model, report, summary, probs)


def balanced_specs(pairs_per_cell: int, rate: float = 0.08, users_per_pair: float = 0.25, channels: int = 60) -> list[GroupSpec]:
    """Nine equally sized cells, handy for protocol and ablation runs."""
    out = []
    for name in GROUPS:
        u, c = name[2:].split("-c_")
        n_u = max(1, int(pairs_per_cell * users_per_pair))
        if u == "low":
            n_u = pairs_per_cell
        n_c = channels
        if c == "low":
            n_c = max(n_c, -(-pairs_per_cell // 10))
        out.append(GroupSpec(u, c, pairs_per_cell, rate, n_u, n_c))
    return out


@dataclass(frozen=True)
class AblationConfig:
    pairs_per_cell: int = 2400
    signal: SignalSpec = SignalSpec(t_days=0.5, game=0.5, affinity=3.5)
    generator: GeneratorConfig = GeneratorConfig(n_games=5)
    plan: SplitPlan = SplitPlan(per_group_test=300, per_group_valid=150)
    subsample: int = 150
    params: BoostParams = BoostParams(learning_rate=0.15, depth=5, l2_leaf_reg=3.0, max_iterations=150)
    features: tuple[str, ...] = tuple(TOP_FEATURES)


@dataclass
class AblationSeed:
    seed: int
    order1_full: RunResult
    order2_full: RunResult
    order2_subsampled: RunResult

    @property
    def interaction_margin(self) -> float:
        return self.order2_full.report.overall_f1 - self.order1_full.report.overall_f1

    @property
    def data_margin(self) -> float:
        return self.order2_full.report.overall_f1 - self.order2_subsampled.report.overall_f1


def make_splits(specs, signal: SignalSpec, generator: GeneratorConfig, plan: SplitPlan, seed: int) -> Splits:
    log = generate_synthetic_log(specs, signal, seed=seed, config=generator)
    records = build_pair_records(log.events, log.thresholds, log.labels)
    return split_records(records, replace(plan, seed=seed))


def ablation_seed(config: AblationConfig, seed: int) -> AblationSeed:
    """Interaction order 1 vs 2 and full vs subsampled training on one dataset."""
    splits = make_splits(balanced_specs(config.pairs_per_cell), config.signal, config.generator, config.plan, seed)
    base = replace(config.params, seed=seed)
    order1 = replace(base, max_ctr_complexity=1)
    order2 = replace(base, max_ctr_complexity=2)
    return AblationSeed(
        seed=seed,
        order1_full=fit_and_evaluate(splits, order1, config.features),
        order2_full=fit_and_evaluate(splits, order2, config.features),
        order2_subsampled=fit_and_evaluate(splits, order2, config.features, config.subsample),
    )


def run_ablation(config: AblationConfig = AblationConfig(), seeds: Sequence[int] = range(5)) -> list[AblationSeed]:
    return [ablation_seed(config, s) for s in seeds]


@dataclass(frozen=True)
class ImportanceConfig:
    pairs_per_cell: int = 800
    signal: SignalSpec = SignalSpec(t_days=1.5, game=1.5)
    generator: GeneratorConfig = GeneratorConfig()
    plan: SplitPlan = SplitPlan(per_group_test=100, per_group_valid=100)
    params: BoostParams = BoostParams(learning_rate=0.15, depth=5, max_iterations=150, max_ctr_complexity=1)
    features: tuple[str, ...] = tuple(TOP_FEATURES)


def importance_run(config: ImportanceConfig, seed: int) -> list[tuple[str, float]]:
    """Features ranked by normalized split gain, most important first."""
    splits = make_splits(balanced_specs(config.pairs_per_cell), config.signal, config.generator, config.plan, seed)
    result = fit_and_evaluate(splits, replace(config.params, seed=seed), config.features)
    imp = feature_importance(result.model)
    return sorted(imp.items(), key=lambda kv: (-kv[1], kv[0]))
