"""Synthetic chat-activity data, stratified test/validation construction and F1.

The generator plants users and channels in the nine activity cells of the
reference training statistics, writes a chat log whose message counts
realise those cells, and labels pairs from a planted logistic score with
the per-cell subscription rate of the table.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .chat_features import (
    CATEGORICAL_FEATURES,
    JUST_CHATTING,
    LEVELS,
    MISSING_NUMERIC,
    ActivityThresholds,
    PairRecord,
    SCOPE_FEATURES,
    Scope,
    aggregate,
    group_name,
)
from .design_matrix import MISSING_LEVEL

UNKNOWN_USER = "__unknown_user__"
GROUPS = [group_name(u, c) for u in LEVELS for c in LEVELS]
USER_SCOPE_FEATURES = frozenset([f + "_u" for f in SCOPE_FEATURES] + ["n_channel"])


class GenerationError(ValueError):
    pass


class SamplingError(ValueError):
    pass


class ConstructionError(ValueError):
    pass


@dataclass(frozen=True)
class GroupSpec:
    user_level: str
    channel_level: str
    pair_count: int
    subscribed_rate: float
    user_count: int | None = None
    channel_count: int | None = None

    def __post_init__(self):
        if self.user_level not in LEVELS or self.channel_level not in LEVELS:
            raise ValueError(f"unknown activity level in {self.user_level}/{self.channel_level}")
        if not 0.0 <= self.subscribed_rate <= 1.0:
            raise ValueError("subscribed_rate must lie in [0, 1]")
        if self.pair_count < 0:
            raise ValueError("pair_count must be non-negative")

    @property
    def name(self) -> str:
        return group_name(self.user_level, self.channel_level)


# group, users, channels, pairs, subscribed, share of pairs, subscription rate
CELL_TABLE = [
    ("low", "normal", 141_000, 40_000, 144_000, 5_696, 0.0049, 0.0397),
    ("low", "low", 10_000, 7_700, 10_000, 611, 0.0003, 0.0595),
    ("normal", "normal", 480_000, 67_000, 562_000, 35_021, 0.0190, 0.0622),
    ("low", "high", 2_153_000, 34_000, 2_359_000, 181_000, 0.0798, 0.0768),
    ("normal", "low", 46_000, 23_000, 47_000, 3_651, 0.0016, 0.0770),
    ("normal", "high", 3_508_000, 36_000, 8_740_000, 683_000, 0.2958, 0.0782),
    ("high", "high", 1_911_000, 36_000, 16_045_000, 1_314_000, 0.5432, 0.0819),
    ("high", "low", 77_000, 31_000, 99_000, 8_498, 0.0033, 0.0858),
    ("high", "normal", 663_000, 73_000, 1_531_000, 135_000, 0.0518, 0.0886),
]


def cell_table_specs(scale: float = 1 / 1000, min_pairs: int = 1) -> list[GroupSpec]:
    """The nine training-set cells scaled down, in table order.

    ``min_pairs`` floors every cell so that rare cells still hold enough
    pairs for stratified sampling; user counts grow with it when needed.
    """
    specs = []
    for u, c, users, channels, pairs, _, _, rate in CELL_TABLE:
        raw = max(pairs * scale, 1e-12)
        p = max(int(min_pairs), int(round(raw)), 1)
        # a floored cell keeps the table's users/channels per pair
        factor = scale * max(1.0, p / raw)
        ch = max(1, int(round(channels * factor)))
        us = min(p, max(1, int(round(users * factor))))
        us = max(us, math.ceil(p / ch))
        specs.append(GroupSpec(u, c, p, rate, us, ch))
    return specs


@dataclass(frozen=True)
class SignalSpec:
    """Weights of the planted subscription score.

    ``t_days``: per standard deviation of the pair's active days;
    ``game``: scale of random per-game effects keyed by the pair's top game;
    ``affinity``: bonus when the channel's main game is the user's hidden
    favourite (a user x channel interaction); ``user`` / ``channel``: scale
    of random per-entity effects.
    """

    t_days: float = 1.0
    game: float = 1.0
    affinity: float = 0.0
    user: float = 0.0
    channel: float = 0.0

    @classmethod
    def none(cls) -> "SignalSpec":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)

    def scaled(self, factor: float) -> "SignalSpec":
        return SignalSpec(*(factor * v for v in asdict(self).values()))


@dataclass(frozen=True)
class GeneratorConfig:
    n_games: int = 10
    days: int = 31
    user_bounds: tuple[int, int] = (8, 40)
    channel_bounds: tuple[int, int] = (60, 600)
    games_per_channel: int = 3
    main_game_weight: float = 0.5
    high_user_extra_mean: float = 40.0
    chars_median: float = 30.0

    @property
    def thresholds(self) -> ActivityThresholds:
        return ActivityThresholds(user=tuple(map(float, self.user_bounds)), channel=tuple(map(float, self.channel_bounds)))


@dataclass
class SyntheticLog:
    events: pd.DataFrame
    labels: dict[tuple[str, str], int]
    groups: dict[tuple[str, str], str]
    thresholds: ActivityThresholds
    specs: list[GroupSpec]
    signal: SignalSpec

    def realized_rates(self) -> dict[str, float]:
        pos = {g: 0 for g in GROUPS}
        tot = {g: 0 for g in GROUPS}
        for key, group in self.groups.items():
            tot[group] += 1
            pos[group] += self.labels[key]
        return {g: pos[g] / tot[g] for g in GROUPS if tot[g]}

    def labels_frame(self) -> pd.DataFrame:
        keys = sorted(self.labels)
        return pd.DataFrame(
            {
                "user_id": [k[0] for k in keys],
                "channel_id": [k[1] for k in keys],
                "subscribed": [self.labels[k] for k in keys],
            }
        )


def _level_bounds(bounds: tuple[int, int], level: str) -> tuple[float, float]:
    low_max, normal_max = bounds
    return {"low": (1, low_max), "normal": (low_max + 1, normal_max), "high": (normal_max + 1, math.inf)}[level]


def _cell_pairs(rng, users, channels, count, user_w, chan_w, load, cap, cload, ccap, name):
    """``count`` distinct pairs covering every user and channel of a cell.

    ``load`` / ``cload`` (updated in place) count pairs per user / channel
    across cells; none goes beyond ``cap`` / ``ccap``, the largest message
    count of its activity band.
    """
    U, C = users.size, channels.size
    if count > U * C:
        raise GenerationError(f"{name}: {count} pairs requested but only {U} users x {C} channels")
    if count < max(U, C):
        raise GenerationError(f"{name}: {count} pairs cannot cover {U} users and {C} channels")
    pu, pc = rng.permutation(U), rng.permutation(C)
    i = np.arange(max(U, C))
    chosen_u = list(users[pu[i % U]])
    chosen_c = list(channels[pc[i % C]])
    np.add.at(load, np.asarray(chosen_u, dtype=np.int64), 1)
    np.add.at(cload, np.asarray(chosen_c, dtype=np.int64), 1)
    seen = set(zip(chosen_u, chosen_c))
    extra = count - len(seen)
    if extra > 0:
        # weighted order over all free pairs (Gumbel-max keys), taken greedily
        for _ in range(64):
            n_draw = U * C if count > 0.5 * U * C else min(U * C, 4 * extra + 64)
            a = rng.integers(0, U, size=n_draw) if n_draw < U * C else np.repeat(np.arange(U), C)
            b = rng.integers(0, C, size=n_draw) if n_draw < U * C else np.tile(np.arange(C), U)
            keys = np.log(user_w[users[a]] * chan_w[channels[b]]) + rng.gumbel(size=a.size)
            for j in np.argsort(-keys, kind="stable"):
                u, c = users[a[j]], channels[b[j]]
                if (u, c) in seen or load[u] >= cap[u] or cload[c] >= ccap[c]:
                    continue
                seen.add((u, c))
                chosen_u.append(u)
                chosen_c.append(c)
                load[u] += 1
                cload[c] += 1
                extra -= 1
                if extra == 0:
                    break
            if extra == 0 or n_draw == U * C:
                break
        if extra > 0:
            raise GenerationError(f"{name}: users and channels cannot carry {count} pairs within their activity bands")
    return np.asarray(chosen_u, dtype=np.int64), np.asarray(chosen_c, dtype=np.int64)


def _allocate_messages(rng, pair_u, pair_c, user_level, chan_level, config):
    """Messages per pair such that every user and channel total lies in its level band."""
    n_users, n_chans = user_level.size, chan_level.size
    u_lo = np.empty(n_users)
    u_hi = np.empty(n_users)
    for i, level in enumerate(LEVELS):
        lo, hi = _level_bounds(config.user_bounds, level)
        u_lo[user_level == i], u_hi[user_level == i] = lo, hi
    c_lo = np.empty(n_chans)
    c_hi = np.empty(n_chans)
    for i, level in enumerate(LEVELS):
        lo, hi = _level_bounds(config.channel_bounds, level)
        c_lo[chan_level == i], c_hi[chan_level == i] = lo, hi

    n_pairs_u = np.bincount(pair_u, minlength=n_users)
    active = n_pairs_u > 0
    if np.any(n_pairs_u[active] > u_hi[active]):
        bad = int(np.flatnonzero(active & (n_pairs_u > u_hi))[0])
        raise GenerationError(f"user {bad} has {n_pairs_u[bad]} pairs, above its activity band")

    target = np.maximum(n_pairs_u, u_lo)
    finite = np.isfinite(u_hi)
    lo_draw = target[finite]
    target[finite] = lo_draw + np.floor(rng.random(lo_draw.size) * (u_hi[finite] - lo_draw + 1))
    target[~finite] += np.floor(rng.exponential(config.high_user_extra_mean, size=(~finite).sum()))
    extra = (target - n_pairs_u).astype(np.int64) * active

    # busier channels attract more of a user's messages
    w = np.asarray([1.0, 2.0, 4.0])[chan_level[pair_c]] * rng.gamma(1.0, size=pair_u.size)
    order = np.argsort(pair_u, kind="stable")
    cw = np.cumsum(w[order])
    end = np.cumsum(n_pairs_u)
    start = end - n_pairs_u
    base = np.where(start > 0, cw[np.maximum(start - 1, 0)], 0.0)
    total = np.where(n_pairs_u > 0, cw[np.maximum(end - 1, 0)] - base, 0.0)
    who = np.repeat(np.arange(n_users), extra)
    draws = base[who] + rng.random(who.size) * total[who]
    slot = np.clip(np.searchsorted(cw, draws, side="right"), start[who], end[who] - 1)
    m = np.ones(pair_u.size, dtype=np.int64)
    np.add.at(m, order[slot], 1)

    pairs_of_user = np.split(order, end[:-1])
    chan_rank = chan_level[pair_c]
    for _ in range(20):
        t_u = np.bincount(pair_u, weights=m, minlength=n_users)
        t_c = np.bincount(pair_c, weights=m, minlength=n_chans)
        over = np.flatnonzero(t_c > c_hi)
        under = np.flatnonzero((t_c < c_lo) & (np.bincount(pair_c, minlength=n_chans) > 0))
        if over.size == 0 and under.size == 0:
            break
        for c in over:
            excess = int(t_c[c] - c_hi[c])
            for p in np.flatnonzero(pair_c == c):
                if excess <= 0:
                    break
                take = min(excess, int(m[p]) - 1)
                if take <= 0:
                    continue
                u = pair_u[p]
                others = [q for q in pairs_of_user[u] if q != p and chan_rank[q] > chan_rank[p]]
                if others:
                    m[max(others, key=lambda q: (chan_rank[q], -q))] += take
                else:
                    take = min(take, int(t_u[u] - u_lo[u]))
                    if take <= 0:
                        continue
                    t_u[u] -= take
                m[p] -= take
                excess -= take
        for c in under:
            deficit = int(c_lo[c] - t_c[c])
            ps = np.flatnonzero(pair_c == c)
            room = u_hi[pair_u[ps]] - np.bincount(pair_u, weights=m, minlength=n_users)[pair_u[ps]]
            for p, r in sorted(zip(ps, room), key=lambda t: -t[1]):
                if deficit <= 0:
                    break
                add = int(min(deficit, r)) if math.isfinite(r) else deficit
                if add > 0:
                    m[p] += add
                    deficit -= add

    t_u = np.bincount(pair_u, weights=m, minlength=n_users)
    t_c = np.bincount(pair_c, weights=m, minlength=n_chans)
    used_c = np.bincount(pair_c, minlength=n_chans) > 0
    if np.any((t_u < u_lo) & active) or np.any((t_u > u_hi) & active):
        raise GenerationError("could not meet the user activity bands")
    if np.any(((t_c < c_lo) | (t_c > c_hi)) & used_c):
        bad = int(np.flatnonzero(((t_c < c_lo) | (t_c > c_hi)) & used_c)[0])
        raise GenerationError(
            f"channel {bad} ({LEVELS[chan_level[bad]]}) cannot reach its activity band with the requested pairs"
        )
    return m


def generate_synthetic_log(
    specs: Sequence[GroupSpec],
    signal: SignalSpec = SignalSpec(),
    seed: int = 0,
    config: GeneratorConfig = GeneratorConfig(),
) -> SyntheticLog:
    """Chat log and subscription labels realising the requested activity cells.

    Each cell gets exactly ``round(rate * pairs)`` subscribers, picked by
    Gumbel-top-k sampling on the planted score, i.e. the score acts as a
    logistic model conditioned on the cell's positive count.
    """
    by_cell = {s.name: s for s in specs}
    if len(specs) != 9 or set(by_cell) != set(GROUPS):
        raise GenerationError("specs must cover the 9 activity cells exactly once")
    rng = np.random.default_rng(seed)

    # entity pools: the largest cell of each level uses the whole pool
    user_pool, chan_pool = {}, {}
    n_users = n_chans = 0
    for level in LEVELS:
        size = max((by_cell[group_name(level, c)].user_count or by_cell[group_name(level, c)].pair_count) for c in LEVELS)
        user_pool[level] = np.arange(n_users, n_users + size)
        n_users += size
    for level in LEVELS:
        size = max((by_cell[group_name(u, level)].channel_count or 1) for u in LEVELS)
        chan_pool[level] = np.arange(n_chans, n_chans + size)
        n_chans += size
    user_level = np.zeros(n_users, dtype=np.int64)
    chan_level = np.zeros(n_chans, dtype=np.int64)
    for i, level in enumerate(LEVELS):
        user_level[user_pool[level]] = i
        chan_level[chan_pool[level]] = i
    user_w = rng.lognormal(0.0, 0.5, size=n_users)
    chan_w = rng.lognormal(0.0, np.where(chan_level == 2, 1.0, 0.5))

    cap = np.asarray([_level_bounds(config.user_bounds, LEVELS[i])[1] for i in user_level])
    cap = np.where(np.isfinite(cap), cap, np.inf)
    load = np.zeros(n_users, dtype=np.int64)
    ccap = np.asarray([_level_bounds(config.channel_bounds, LEVELS[i])[1] for i in chan_level])
    cload = np.zeros(n_chans, dtype=np.int64)
    pair_u, pair_c, pair_cell = [], [], []
    for cell_i, name in enumerate(GROUPS):
        spec = by_cell[name]
        if spec.pair_count < 1:
            raise GenerationError(f"{name}: needs at least one pair")
        pool_u, pool_c = user_pool[spec.user_level], chan_pool[spec.channel_level]
        n_u = min(spec.user_count or min(spec.pair_count, pool_u.size), pool_u.size)
        n_c = min(spec.channel_count or 1, pool_c.size)
        users = np.sort(rng.choice(pool_u, size=n_u, replace=False))
        chans = np.sort(rng.choice(pool_c, size=n_c, replace=False))
        u, c = _cell_pairs(rng, users, chans, spec.pair_count, user_w, chan_w, load, cap, cload, ccap, name)
        pair_u.append(u)
        pair_c.append(c)
        pair_cell.append(np.full(u.size, cell_i))
    pair_u = np.concatenate(pair_u)
    pair_c = np.concatenate(pair_c)
    pair_cell = np.concatenate(pair_cell)
    n_pairs = pair_u.size

    m = _allocate_messages(rng, pair_u, pair_c, user_level, chan_level, config)

    # channel game mix and daily schedule
    games = np.asarray([f"g{i:02d}" for i in range(config.n_games - 1)] + [JUST_CHATTING])
    n_g = games.size
    k = min(config.games_per_channel, n_g)
    mix = np.stack([rng.choice(n_g, size=k, replace=False) for _ in range(n_chans)])
    mix_w = np.full(k, (1 - config.main_game_weight) / max(k - 1, 1))
    mix_w[0] = config.main_game_weight if k > 1 else 1.0
    schedule = mix[np.arange(n_chans)[:, None], rng.choice(k, size=(n_chans, config.days), p=mix_w)]

    # active days per pair, then messages spread over those days
    D = config.days
    n_days = 1 + np.floor(rng.random(n_pairs) * np.minimum(m, D)).astype(np.int64)
    day_choice = np.argsort(rng.random((n_pairs, D)), axis=1)
    ev_pair = np.repeat(np.arange(n_pairs), m)
    offsets = np.cumsum(m) - m
    j = np.arange(ev_pair.size) - offsets[ev_pair]
    slot = np.where(j < n_days[ev_pair], j, np.floor(rng.random(ev_pair.size) * n_days[ev_pair]).astype(np.int64))
    ev_day = day_choice[ev_pair, slot]
    ev_game = schedule[pair_c[ev_pair], ev_day]
    ev_time = ev_day + rng.random(ev_pair.size)
    ev_chars = np.maximum(1, np.round(rng.lognormal(np.log(config.chars_median), 0.8, size=ev_pair.size))).astype(np.int64)

    uid = np.asarray([f"u{i:06d}" for i in range(n_users)])
    cid = np.asarray([f"c{i:05d}" for i in range(n_chans)])
    events = pd.DataFrame(
        {
            "user_id": uid[pair_u[ev_pair]],
            "channel_id": cid[pair_c[ev_pair]],
            "game_id": games[ev_game],
            "timestamp": ev_time,
            "message_chars": ev_chars,
        }
    )
    events = events.iloc[np.argsort(ev_time, kind="stable")].reset_index(drop=True)

    # planted score from the realised pair features
    feats = aggregate(events, Scope.PAIR)
    keys = list(zip(uid[pair_u], cid[pair_c]))
    feats = feats.loc[keys]
    t_days = feats["t_days"].to_numpy(dtype=np.float64)
    game_index = {g: i for i, g in enumerate(games)}
    top = np.asarray([game_index[g] for g in feats["g_top"]])
    game_eff = rng.normal(size=n_g)
    favourite = rng.integers(0, n_g, size=n_users)
    user_eff = rng.normal(size=n_users)
    chan_eff = rng.normal(size=n_chans)
    sd = t_days.std()
    score = (
        signal.t_days * ((t_days - t_days.mean()) / sd if sd > 0 else 0.0)
        + signal.game * game_eff[top]
        + signal.affinity * (favourite[pair_u] == mix[pair_c, 0])
        + signal.user * user_eff[pair_u]
        + signal.channel * chan_eff[pair_c]
    )
    gumbel = rng.gumbel(size=n_pairs)
    labels = np.zeros(n_pairs, dtype=np.int64)
    for cell_i, name in enumerate(GROUPS):
        idx = np.flatnonzero(pair_cell == cell_i)
        k_pos = int(round(by_cell[name].subscribed_rate * idx.size))
        if k_pos:
            labels[idx[np.argsort(-(score[idx] + gumbel[idx]), kind="stable")[:k_pos]]] = 1

    return SyntheticLog(
        events=events,
        labels={key: int(v) for key, v in zip(keys, labels)},
        groups={key: GROUPS[c] for key, c in zip(keys, pair_cell)},
        thresholds=config.thresholds,
        specs=list(specs),
        signal=signal,
    )


# ---------------------------------------------------------------- sampling

@dataclass(frozen=True)
class SplitPlan:
    per_group_test: int = 10_000
    per_group_valid: int = 5_000
    max_per_group_train: int | None = None
    duplicate_cold_start: bool = True
    test_cold_start_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.per_group_test < 1 or self.per_group_valid < 1:
            raise ValueError("per-group counts must be positive")
        if self.max_per_group_train is not None and self.max_per_group_train < 1:
            raise ValueError("max_per_group_train must be >= 1")
        if not 0.0 <= self.test_cold_start_fraction <= 1.0:
            raise ValueError("test_cold_start_fraction must lie in [0, 1]")


def _by_group(records: Sequence[PairRecord]) -> dict[str, list[int]]:
    cells = {g: [] for g in GROUPS}
    for i, rec in enumerate(records):
        cells[rec.group].append(i)
    return cells


def _sample_cells(records, per_group, rng, what) -> list[int]:
    cells = _by_group(records)
    chosen = []
    for group in GROUPS:
        idx = cells[group]
        if len(idx) < per_group:
            raise SamplingError(f"{what}: cell {group} holds {len(idx)} pairs, {per_group} needed")
        pick = rng.choice(len(idx), size=per_group, replace=False)
        chosen.extend(idx[i] for i in np.sort(pick))
    return chosen


def cold_start(record: PairRecord, sentinel: str = UNKNOWN_USER) -> PairRecord:
    """Copy of ``record`` for a user without history.

    The user id becomes ``sentinel`` and every user-level aggregate is set to
    the missing marker; pair, channel and group information is kept.
    """
    feats = dict(record.features)
    for name in feats:
        if name in USER_SCOPE_FEATURES:
            feats[name] = MISSING_LEVEL if name in CATEGORICAL_FEATURES else MISSING_NUMERIC
    return replace(record, uid=sentinel, features=feats)


def _check_sentinel(records, sentinel):
    if any(rec.uid == sentinel for rec in records):
        raise ConstructionError(f"sentinel user id {sentinel!r} collides with a real user")


def build_test_set(records: Sequence[PairRecord], plan: SplitPlan) -> list[PairRecord]:
    """``plan.per_group_test`` uniformly sampled pairs from every cell.

    A ``test_cold_start_fraction`` share of each cell is turned into
    cold-start copies, mimicking test users without history.
    """
    rng = np.random.default_rng([plan.seed, 1])
    chosen = _sample_cells(records, plan.per_group_test, rng, "test set")
    n_cold = int(round(plan.test_cold_start_fraction * plan.per_group_test))
    if n_cold:
        _check_sentinel(records, UNKNOWN_USER)
    out = []
    for start in range(0, len(chosen), plan.per_group_test):
        block = chosen[start : start + plan.per_group_test]
        cold = set(rng.choice(len(block), size=n_cold, replace=False).tolist()) if n_cold else set()
        out.extend(cold_start(records[i]) if j in cold else records[i] for j, i in enumerate(block))
    return out


def build_validation_set(
    records: Sequence[PairRecord], plan: SplitPlan, exclude: Sequence[PairRecord] = ()
) -> list[PairRecord]:
    """``plan.per_group_valid`` pairs per cell plus a cold-start copy of each."""
    if plan.duplicate_cold_start:
        _check_sentinel(records, UNKNOWN_USER)
    taken = {rec.key for rec in exclude} | {(rec.uid, rec.cid) for rec in exclude}
    pool = [rec for rec in records if rec.key not in taken]
    rng = np.random.default_rng([plan.seed, 2])
    chosen = _sample_cells(pool, plan.per_group_valid, rng, "validation set")
    out = []
    for i in chosen:
        out.append(pool[i])
        if plan.duplicate_cold_start:
            out.append(cold_start(pool[i]))
    return out


def subsample_training(records: Sequence[PairRecord], max_per_group: int | None, seed: int) -> list[PairRecord]:
    """At most ``max_per_group`` uniformly chosen records per cell, input order kept."""
    if max_per_group is None or max_per_group == math.inf:
        return list(records)
    if max_per_group < 1:
        raise ValueError("max_per_group must be >= 1")
    rng = np.random.default_rng([seed, 3])
    keep = []
    for group, idx in _by_group(records).items():
        if len(idx) > max_per_group:
            idx = [idx[i] for i in rng.choice(len(idx), size=int(max_per_group), replace=False)]
        keep.extend(idx)
    return [records[i] for i in sorted(keep)]


@dataclass
class Splits:
    train: list[PairRecord]
    valid: list[PairRecord]
    test: list[PairRecord]


def _original_key(rec: PairRecord, lookup: Mapping[int, tuple[str, str]]) -> tuple[str, str]:
    return lookup.get(id(rec), rec.key)


def split_records(records: Sequence[PairRecord], plan: SplitPlan) -> Splits:
    """Disjoint test, validation and (optionally subsampled) training sets."""
    _check_sentinel(records, UNKNOWN_USER)
    rng = np.random.default_rng([plan.seed, 1])
    test_idx = set(_sample_cells(records, plan.per_group_test, rng, "test set"))
    test = build_test_set(records, plan)
    rest = [rec for i, rec in enumerate(records) if i not in test_idx]
    valid = build_validation_set(rest, plan)
    valid_keys = {rec.key for rec in valid if rec.uid != UNKNOWN_USER}
    rest = [rec for rec in rest if rec.key not in valid_keys]
    train = subsample_training(rest, plan.max_per_group_train, plan.seed)
    return Splits(train, valid, test)


# ---------------------------------------------------------------- evaluation

def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


@dataclass
class EvalReport:
    overall_f1: float
    per_group_f1: dict[str, float]
    threshold: float
    counts: dict[str, dict[str, int]]
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "overall_f1": self.overall_f1,
            "per_group_f1": self.per_group_f1,
            "threshold": self.threshold,
            "counts": self.counts,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "EvalReport":
        return cls(
            overall_f1=float(doc["overall_f1"]),
            per_group_f1={k: float(v) for k, v in doc["per_group_f1"].items()},
            threshold=float(doc["threshold"]),
            counts={k: {kk: int(vv) for kk, vv in v.items()} for k, v in doc["counts"].items()},
            extra=dict(doc.get("extra", {})),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def format_groups(self) -> str:
        lines = [f"{'group':<20}{'n':>8}{'tp':>7}{'fp':>7}{'fn':>7}{'f1':>9}"]
        for group in GROUPS:
            c = self.counts.get(group, {"n": 0, "tp": 0, "fp": 0, "fn": 0})
            lines.append(
                f"{group:<20}{c['n']:>8}{c['tp']:>7}{c['fp']:>7}{c['fn']:>7}{self.per_group_f1.get(group, 0.0):>9.4f}"
            )
        lines.append(f"{'overall':<20}{'':>29}{self.overall_f1:>9.4f}")
        return "\n".join(lines)


def f1_score(probabilities, labels, threshold: float, groups: Sequence[str] | None = None) -> EvalReport:
    """F1 of ``probability >= threshold`` overall and per activity cell."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"probabilities {p.shape} and labels {y.shape} differ in length")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    pred = p >= threshold
    pos = y == 1

    def counts(mask):
        tp = int(np.sum(pred & pos & mask))
        fp = int(np.sum(pred & ~pos & mask))
        fn = int(np.sum(~pred & pos & mask))
        return {"n": int(mask.sum()), "tp": tp, "fp": fp, "fn": fn}

    overall = counts(np.ones(p.size, dtype=bool))
    per_counts, per_f1 = {"overall": overall}, {}
    if groups is not None:
        g = np.asarray(groups)
        if g.shape != p.shape:
            raise ValueError("groups and probabilities differ in length")
        for group in GROUPS:
            c = counts(g == group)
            per_counts[group] = c
            per_f1[group] = _f1(c["tp"], c["fp"], c["fn"])
    return EvalReport(_f1(overall["tp"], overall["fp"], overall["fn"]), per_f1, float(threshold), per_counts)


@dataclass(frozen=True)
class RunSummary:
    """One row of an ablation table."""

    f1_test: float
    train_rows: int
    features: str
    max_ctr_complexity: int
    learning_rate: float

    def to_dict(self) -> dict:
        return asdict(self)


def format_runs(rows: Sequence[RunSummary]) -> str:
    lines = [f"{'f1 mytest':>10} {'train data':>11} {'features':>13} {'max_ctr_compl':>14} {'lr':>6}"]
    for r in rows:
        lines.append(
            f"{r.f1_test:>10.4f} {r.train_rows:>11} {r.features:>13} {r.max_ctr_complexity:>14} {r.learning_rate:>6.3g}"
        )
    return "\n".join(lines)
