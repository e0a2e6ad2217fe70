"""Aggregate chat events into user, channel and channel-user pair features.

Every scope gets the same 13 activity features::

    t_min  t_max  t_days  t_dur  t_active      time (whole days)
    m_total  m_max  m_med                      message length in characters
    g_n_mes  g_n  g_top  g_chat  g_top_freq    message counts and games

Pair-scope features keep the plain names; user- and channel-scope copies
carry a ``_u`` / ``_c`` suffix (so ``g_top_c`` is the channel's top game).
Pair records also hold ``uid``, ``cid``, ``n_channel``, ``n_user`` and the
activity groups ``u_group`` / ``c_group``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .design_matrix import MISSING_LEVEL, ColumnKind, DesignMatrix

EVENT_COLUMNS = ["user_id", "channel_id", "game_id", "timestamp", "message_chars"]
SCOPE_FEATURES = [
    "t_min", "t_max", "t_days", "t_dur", "t_active",
    "m_total", "m_max", "m_med",
    "g_n_mes", "g_n", "g_top", "g_chat", "g_top_freq",
]
ID_FEATURES = ["uid", "n_channel", "u_group", "cid", "n_user", "c_group"]
TOP_FEATURES = ["uid", "cid", "t_days", "g_top", "g_top_c", "n_user", "n_channel", "m_med", "m_max", "t_min"]
LEVELS = ("low", "normal", "high")
JUST_CHATTING = "just_chatting"
MISSING_NUMERIC = -1.0
LABEL = "subscribed"
GROUP = "group"


class MissingKeyError(KeyError):
    pass


class LabelingError(ValueError):
    pass


class Scope(str, Enum):
    USER = "user"
    CHANNEL = "channel"
    PAIR = "pair"


SCOPE_KEYS = {
    Scope.USER: ["user_id"],
    Scope.CHANNEL: ["channel_id"],
    Scope.PAIR: ["user_id", "channel_id"],
}
SCOPE_SUFFIX = {Scope.PAIR: "", Scope.USER: "_u", Scope.CHANNEL: "_c"}


def all_feature_columns() -> list[str]:
    cols = []
    for scope in (Scope.PAIR, Scope.USER, Scope.CHANNEL):
        cols += [f + SCOPE_SUFFIX[scope] for f in SCOPE_FEATURES]
    return cols + ID_FEATURES


CATEGORICAL_FEATURES = frozenset({"uid", "cid", "u_group", "c_group", "g_top", "g_top_u", "g_top_c"})


def is_categorical_feature(name: str) -> bool:
    return name in CATEGORICAL_FEATURES


def feature_schema(names: Iterable[str]) -> dict[str, ColumnKind]:
    return {
        n: ColumnKind.CATEGORICAL if is_categorical_feature(n) else ColumnKind.NUMERIC for n in names
    }


@dataclass(frozen=True)
class ChatEvent:
    user_id: str
    channel_id: str
    game_id: str
    timestamp: float
    message_chars: int

    def __post_init__(self):
        if self.message_chars < 0:
            raise ValueError("message_chars must be non-negative")
        if not np.isfinite(self.timestamp):
            raise ValueError("timestamp must be finite")


def events_frame(events: Iterable[ChatEvent] | pd.DataFrame) -> pd.DataFrame:
    """Normalise events into a frame with string ids and integer chars."""
    if isinstance(events, pd.DataFrame):
        df = events.loc[:, EVENT_COLUMNS].copy()
    else:
        df = pd.DataFrame(
            [(e.user_id, e.channel_id, e.game_id, e.timestamp, e.message_chars) for e in events],
            columns=EVENT_COLUMNS,
        )
    for col in ("user_id", "channel_id", "game_id"):
        df[col] = df[col].astype(str)
    df["timestamp"] = df["timestamp"].astype(np.float64)
    df["message_chars"] = df["message_chars"].astype(np.int64)
    if (df["message_chars"] < 0).any():
        raise ValueError("message_chars must be non-negative")
    if not np.isfinite(df["timestamp"]).all():
        raise ValueError("timestamps must be finite")
    return df


def read_events(path: str | os.PathLike) -> pd.DataFrame:
    """Load an event log from JSONL (one event per line) or CSV."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"event log {path} does not exist")
    dtypes = {"user_id": str, "channel_id": str, "game_id": str}
    if path.endswith(".csv"):
        df = pd.read_csv(path, dtype=dtypes)
    else:
        df = pd.read_json(path, lines=True, dtype=dtypes)
        if df.empty:
            df = pd.DataFrame(columns=EVENT_COLUMNS)
    missing = [c for c in EVENT_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: event log lacks columns {missing}")
    return events_frame(df)


def write_events_jsonl(events: pd.DataFrame, fh) -> None:
    for row in events.loc[:, EVENT_COLUMNS].itertuples(index=False):
        fh.write(
            json.dumps(
                {
                    "user_id": row.user_id,
                    "channel_id": row.channel_id,
                    "game_id": row.game_id,
                    "timestamp": float(row.timestamp),
                    "message_chars": int(row.message_chars),
                }
            )
            + "\n"
        )


def aggregate(events: pd.DataFrame, scope: Scope | str, just_chatting: str = JUST_CHATTING) -> pd.DataFrame:
    """The 13 activity features for every key of ``scope``."""
    scope = Scope(scope)
    keys = SCOPE_KEYS[scope]
    df = events.loc[:, EVENT_COLUMNS].copy()
    df["day"] = np.floor(df["timestamp"]).astype(np.int64)
    df["is_chat"] = (df["game_id"] == just_chatting).astype(np.int64)
    grouped = df.groupby(keys, sort=True)
    out = pd.DataFrame(
        {
            "t_min": grouped["day"].min(),
            "t_max": grouped["day"].max(),
            "t_days": grouped["day"].nunique(),
            "m_total": grouped["message_chars"].sum(),
            "m_max": grouped["message_chars"].max(),
            "m_med": grouped["message_chars"].median().astype(np.float64),
            "g_n_mes": grouped.size(),
            "g_n": grouped["game_id"].nunique(),
            "g_chat": grouped["is_chat"].sum(),
        }
    )
    out["t_dur"] = out["t_max"] - out["t_min"]
    # a single-day span counts as fully active
    out["t_active"] = np.where(out["t_dur"] > 0, out["t_days"] / out["t_dur"].where(out["t_dur"] > 0, 1), 1.0)

    per_game = df.groupby(keys + ["game_id"], sort=False).size().rename("n").reset_index()
    # most messages first, ties to the lexicographically smallest game
    per_game = per_game.sort_values(keys + ["n", "game_id"], ascending=[True] * len(keys) + [False, True])
    top = per_game.drop_duplicates(keys).set_index(keys)
    out["g_top"] = top["game_id"]
    out["g_top_freq"] = top["n"] / out["g_n_mes"]
    return out.loc[:, SCOPE_FEATURES]


def aggregate_scope(
    events: pd.DataFrame, scope: Scope | str, key, just_chatting: str = JUST_CHATTING
) -> dict:
    """Feature block of one user, channel or (user, channel) pair."""
    scope = Scope(scope)
    keys = SCOPE_KEYS[scope]
    key_t = tuple(key) if scope is Scope.PAIR else (key,)
    mask = np.ones(len(events), dtype=bool)
    for col, value in zip(keys, key_t):
        mask &= (events[col] == str(value)).to_numpy()
    if not mask.any():
        raise MissingKeyError(f"no events for {scope.value} {key!r}")
    row = aggregate(events[mask], scope, just_chatting).iloc[0]
    return {f: _plain(row[f]) for f in SCOPE_FEATURES}


@dataclass(frozen=True)
class ActivityThresholds:
    """Inclusive upper message counts of the low and normal groups."""

    user: tuple[float, float]
    channel: tuple[float, float]

    def __post_init__(self):
        for name, (low_max, normal_max) in (("user", self.user), ("channel", self.channel)):
            if not low_max < normal_max:
                raise ValueError(f"{name} thresholds need low_max < normal_max")

    @classmethod
    def from_counts(cls, user_counts, channel_counts, quantiles=(1 / 3, 2 / 3)) -> "ActivityThresholds":
        def cut(counts):
            counts = np.asarray(counts, dtype=np.float64)
            lo, hi = np.quantile(counts, quantiles, method="lower")
            if not lo < hi:
                hi = lo + 1
            return float(lo), float(hi)

        return cls(user=cut(user_counts), channel=cut(channel_counts))

    @classmethod
    def from_events(cls, events: pd.DataFrame, quantiles=(1 / 3, 2 / 3)) -> "ActivityThresholds":
        return cls.from_counts(
            events.groupby("user_id").size(), events.groupby("channel_id").size(), quantiles
        )

    def to_dict(self) -> dict:
        return {"user": list(self.user), "channel": list(self.channel)}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ActivityThresholds":
        return cls(user=tuple(doc["user"]), channel=tuple(doc["channel"]))


def label_activity(count: float, thresholds: tuple[float, float]) -> str:
    low_max, normal_max = thresholds
    if count <= low_max:
        return "low"
    if count <= normal_max:
        return "normal"
    return "high"


def group_name(u_group: str, c_group: str) -> str:
    return f"u_{u_group}-c_{c_group}"


@dataclass
class PairRecord:
    uid: str
    cid: str
    u_group: str
    c_group: str
    features: dict = field(default_factory=dict)
    subscribed: int | None = None

    @property
    def key(self) -> tuple[str, str]:
        return (self.uid, self.cid)

    @property
    def group(self) -> str:
        return group_name(self.u_group, self.c_group)

    def row(self) -> dict:
        out = dict(self.features)
        out.update(uid=self.uid, cid=self.cid, u_group=self.u_group, c_group=self.c_group)
        return out


def build_pair_records(
    events: pd.DataFrame,
    thresholds: ActivityThresholds | None = None,
    labels: Mapping[tuple[str, str], int] | None = None,
    just_chatting: str = JUST_CHATTING,
) -> list[PairRecord]:
    """One record per distinct (user, channel) pair, sorted by key.

    With ``labels`` given every pair must be labelled; without, records carry
    ``subscribed=None``.
    """
    if len(events) == 0:
        raise ValueError("cannot build pair records from an empty event log")
    if thresholds is None:
        thresholds = ActivityThresholds.from_events(events)
    pair = aggregate(events, Scope.PAIR, just_chatting)
    user = aggregate(events, Scope.USER, just_chatting).add_suffix("_u")
    channel = aggregate(events, Scope.CHANNEL, just_chatting).add_suffix("_c")
    user["n_channel"] = events.groupby("user_id")["channel_id"].nunique()
    channel["n_user"] = events.groupby("channel_id")["user_id"].nunique()

    table = pair.reset_index()
    table = table.join(user, on="user_id").join(channel, on="channel_id")
    u_low, u_norm = thresholds.user
    c_low, c_norm = thresholds.channel
    table["u_group"] = np.select(
        [table["g_n_mes_u"] <= u_low, table["g_n_mes_u"] <= u_norm], ["low", "normal"], "high"
    )
    table["c_group"] = np.select(
        [table["g_n_mes_c"] <= c_low, table["g_n_mes_c"] <= c_norm], ["low", "normal"], "high"
    )

    feature_cols = [c for c in all_feature_columns() if c not in ID_FEATURES] + ["n_channel", "n_user"]
    records = []
    for row in table.to_dict("records"):
        key = (row["user_id"], row["channel_id"])
        label = None
        if labels is not None:
            if key not in labels:
                raise LabelingError(f"no label for pair {key}")
            label = int(labels[key])
        feats = {c: _plain(row[c]) for c in feature_cols}
        records.append(PairRecord(key[0], key[1], row["u_group"], row["c_group"], feats, label))
    return records


def _plain(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    return value


def records_frame(records: Sequence[PairRecord], features: Sequence[str] | None = None) -> pd.DataFrame:
    """Flat table of records: selected features, ``group`` and the label."""
    features = list(features) if features is not None else all_feature_columns()
    rows = []
    for rec in records:
        full = rec.row()
        row = {f: full[f] for f in features}
        row[GROUP] = rec.group
        row[LABEL] = rec.subscribed
        rows.append(row)
    return pd.DataFrame(rows, columns=features + [GROUP, LABEL])


def frame_records(df: pd.DataFrame) -> list[PairRecord]:
    """Inverse of :func:`records_frame` for whatever feature columns exist."""
    records = []
    id_cols = {"uid", "cid", "u_group", "c_group", GROUP, LABEL}
    feature_cols = [c for c in df.columns if c not in id_cols]
    for row in df.to_dict("records"):
        if "u_group" in row:
            u_group, c_group = row["u_group"], row["c_group"]
        else:
            u_part, c_part = str(row[GROUP]).split("-")
            u_group, c_group = u_part[2:], c_part[2:]
        label = row.get(LABEL)
        label = None if label is None or pd.isna(label) else int(label)
        feats = {c: _plain(row[c]) for c in feature_cols}
        records.append(PairRecord(str(row.get("uid", "")), str(row.get("cid", "")), u_group, c_group, feats, label))
    return records


def read_pair_csv(path: str | os.PathLike) -> pd.DataFrame:
    cat_cols = {c: str for c in ("uid", "cid", "u_group", "c_group", GROUP)}
    cat_cols.update({f"g_top{s}": str for s in ("", "_u", "_c")})
    return pd.read_csv(path, dtype=cat_cols, keep_default_na=False, na_values={LABEL: [""]})


def design_matrix(records: Sequence[PairRecord], features: Sequence[str]) -> DesignMatrix:
    """DesignMatrix of labelled records restricted to ``features``."""
    rows = [rec.row() for rec in records]
    for row, rec in zip(rows, records):
        if rec.subscribed is None:
            raise LabelingError(f"record {rec.key} has no label")
        row[LABEL] = rec.subscribed
    schema = feature_schema(features)
    if not rows:
        raise ValueError("no records")
    for row in rows:
        for name, kind in schema.items():
            if kind is ColumnKind.CATEGORICAL and (row[name] is None or row[name] == ""):
                row[name] = MISSING_LEVEL
    return DesignMatrix.from_rows(rows, schema, LABEL)
