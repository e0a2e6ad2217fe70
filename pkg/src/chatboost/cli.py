"""Command-line pipeline: synth -> featurize -> train -> evaluate.

Every command takes ``--config file.json``, repeatable ``--set a.b=value``
overrides and a single ``--seed``. Outputs are staged in temporary files and
renamed into place only after the command succeeds. Failures print one JSON
line ``{"error": ..., "message": ...}`` on stderr and exit with status 1.
"""
from __future__ import annotations

import argparse
import copy
import io
import json
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Sequence

from .chat_features import (
    ActivityThresholds,
    build_pair_records,
    design_matrix,
    frame_records,
    read_events,
    read_pair_csv,
    records_frame,
    write_events_jsonl,
)
from .experiment import (
    GROUPS,
    GeneratorConfig,
    SignalSpec,
    SplitPlan,
    f1_score,
    generate_synthetic_log,
    split_records,
    cell_table_specs,
)
from .gbdt import BoostModel, BoostParams, predict, train
from .harness import balanced_specs, resolve_features
from .leakage import leakage_demo

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": None,
    "synth": {"scale": 0.001, "min_pairs": 100, "balanced_pairs": None, "n_games": 10, "days": 31},
    "signal": {"t_days": 1.0, "game": 1.0, "affinity": 1.0, "user": 0.0, "channel": 0.0},
    "features": "all",
    "boost": {**asdict(BoostParams.reference()), "max_iterations": 300},
    # scaled to the default synthetic log; the full protocol uses 10000 / 5000
    "split": {
        "per_group_test": 40,
        "per_group_valid": 20,
        "max_per_group_train": None,
        "duplicate_cold_start": True,
        "test_cold_start_fraction": 0.5,
    },
    "threshold": None,
    "leakage": {"m": 10000, "lambda_fixed": 0.1, "n_permutations": 4},
}


class ConfigError(ValueError):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config: dict, assignment: str) -> None:
    """Set ``a.b.c=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = config
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config section {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = _parse_value(value)


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, prefix + key + ".")
        else:
            base[key] = value


@dataclass(frozen=True)
class RunConfig:
    seed: int
    synth: dict
    signal: SignalSpec
    features: Any
    boost: BoostParams
    split: SplitPlan
    threshold: float | None
    leakage: dict

    @classmethod
    def load(cls, path: str | None = None, overrides: Sequence[str] = (), seed: int | None = None) -> "RunConfig":
        doc = copy.deepcopy(DEFAULT_CONFIG)
        if path:
            with open(path) as fh:
                _merge(doc, json.load(fh))
        for item in overrides:
            apply_override(doc, item)
        if seed is not None:
            doc["seed"] = seed
        if doc["seed"] is None:
            raise ConfigError("a seed is required (--seed or 'seed' in the config)")
        s = int(doc["seed"])
        known = {f.name for f in fields(BoostParams)}
        unknown = set(doc["boost"]) - known
        if unknown:
            raise ConfigError(f"unknown boost keys {sorted(unknown)}")
        resolve_features(doc["features"])
        return cls(
            seed=s,
            synth=doc["synth"],
            signal=SignalSpec(**doc["signal"]),
            features=doc["features"],
            boost=BoostParams(**{**doc["boost"], "seed": s}),
            split=SplitPlan(**doc["split"], seed=s),
            threshold=doc["threshold"],
            leakage=doc["leakage"],
        )


class Outputs:
    """Files staged in memory and written atomically by :meth:`commit`."""

    def __init__(self):
        self._files: list[tuple[Path, bytes]] = []

    def add(self, path: str | os.PathLike, content: str | bytes) -> None:
        data = content.encode("utf-8") if isinstance(content, str) else content
        self._files.append((Path(path), data))

    def commit(self) -> None:
        staged = []
        umask = os.umask(0)
        os.umask(umask)
        try:
            for path, data in self._files:
                path.parent.mkdir(parents=True, exist_ok=True)
                fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
                staged.append((tmp, path))
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                os.chmod(tmp, 0o666 & ~umask)
        except BaseException:
            for tmp, _ in staged:
                os.unlink(tmp)
            raise
        for tmp, path in staged:
            os.replace(tmp, path)


def _json(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _csv(df) -> str:
    buf = io.StringIO()
    df.to_csv(buf, index=False, lineterminator="\n", float_format=None)
    return buf.getvalue()


def cmd_synth(args, config: RunConfig, out: Outputs) -> str:
    syn = config.synth
    if syn.get("balanced_pairs"):
        specs = balanced_specs(int(syn["balanced_pairs"]))
    else:
        specs = cell_table_specs(float(syn["scale"]), int(syn["min_pairs"]))
    gen = GeneratorConfig(n_games=int(syn["n_games"]), days=int(syn["days"]))
    log = generate_synthetic_log(specs, config.signal, seed=config.seed, config=gen)
    buf = io.StringIO()
    write_events_jsonl(log.events, buf)
    d = Path(args.out)
    out.add(d / "events.jsonl", buf.getvalue())
    out.add(d / "labels.csv", _csv(log.labels_frame()))
    out.add(d / "thresholds.json", _json(log.thresholds.to_dict()))
    rates = log.realized_rates()
    lines = [f"{'group':<20}{'pairs':>8}{'subscribed':>12}"]
    counts = {g: 0 for g in GROUPS}
    for g in log.groups.values():
        counts[g] += 1
    for g in GROUPS:
        lines.append(f"{g:<20}{counts[g]:>8}{rates.get(g, 0.0):>12.4f}")
    lines.append(f"{'total':<20}{len(log.groups):>8}")
    return "\n".join(lines)


def _read_labels(path) -> dict[tuple[str, str], int]:
    import pandas as pd

    df = pd.read_csv(path, dtype={"user_id": str, "channel_id": str})
    missing = {"user_id", "channel_id", "subscribed"} - set(df.columns)
    if missing:
        raise ConfigError(f"{path}: labels lack columns {sorted(missing)}")
    return {(u, c): int(s) for u, c, s in zip(df["user_id"], df["channel_id"], df["subscribed"])}


def cmd_featurize(args, config: RunConfig, out: Outputs) -> str:
    events = read_events(args.events)
    if len(events) == 0:
        raise ValueError(f"{args.events}: event log is empty")
    thresholds = None
    if args.thresholds:
        with open(args.thresholds) as fh:
            thresholds = ActivityThresholds.from_dict(json.load(fh))
    labels = _read_labels(args.labels) if args.labels else None
    records = build_pair_records(events, thresholds, labels)
    names = resolve_features(config.features)
    out.add(args.out, _csv(records_frame(records, names)))
    return f"{len(records)} pair records, {len(names)} features"


def _load_records(path):
    return frame_records(read_pair_csv(path))


def cmd_train(args, config: RunConfig, out: Outputs) -> str:
    records = _load_records(args.pairs)
    names = resolve_features(config.features)
    splits = split_records(records, config.split)
    model = train(design_matrix(splits.train, names), design_matrix(splits.valid, names), config.boost)
    test_dm = design_matrix(splits.test, names)
    threshold = config.threshold if config.threshold is not None else config.boost.threshold
    report = f1_score(predict(model, test_dm), test_dm.target, threshold, [r.group for r in splits.test])
    report.extra = {
        "best_iteration": model.best_iteration,
        "n_trees": len(model.trees),
        "train_rows": len(splits.train),
        "valid_rows": len(splits.valid),
        "test_rows": len(splits.test),
        "importance": dict(sorted(model.importance.items(), key=lambda kv: (-kv[1], kv[0]))[:10]),
    }
    d = Path(args.out)
    out.add(d / "model.json", model.to_json())
    out.add(d / "report.json", report.to_json() + "\n")
    out.add(d / "test.csv", _csv(records_frame(splits.test, names)))
    return report.format_groups() + f"\nbest_iteration {model.best_iteration}"


def _load_model(path) -> BoostModel:
    with open(path) as fh:
        return BoostModel.from_json(fh.read())


def cmd_evaluate(args, config: RunConfig, out: Outputs) -> str:
    model = _load_model(args.model)
    records = _load_records(args.data)
    dm = design_matrix(records, list(model.features.schema))
    threshold = args.threshold
    if threshold is None:
        threshold = config.threshold if config.threshold is not None else model.params.threshold
    report = f1_score(predict(model, dm), dm.target, threshold, [r.group for r in records])
    if args.out:
        out.add(args.out, report.to_json() + "\n")
    return report.format_groups()


def cmd_predict(args, config: RunConfig, out: Outputs) -> str:
    import pandas as pd

    model = _load_model(args.model)
    records = _load_records(args.data)
    # labels are not needed for scoring; a placeholder keeps the matrix valid
    dm = design_matrix([replace(r, subscribed=0) for r in records], list(model.features.schema))
    probs = predict(model, dm)
    threshold = config.threshold if config.threshold is not None else model.params.threshold
    df = pd.DataFrame(
        {
            "uid": [r.uid for r in records],
            "cid": [r.cid for r in records],
            "probability": [repr(float(p)) for p in probs],
            "subscribed": (probs >= threshold).astype(int),
        }
    )
    out.add(args.out, _csv(df))
    return f"{len(records)} predictions"


def cmd_leakage(args, config: RunConfig, out: Outputs) -> str:
    leak = config.leakage
    m = int(args.m if args.m is not None else leak["m"])
    report = leakage_demo(m, config.seed, float(leak["lambda_fixed"]), int(leak["n_permutations"]))
    text = _json(report.to_dict())
    if args.out:
        out.add(args.out, text)
    return text.rstrip()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chatboost", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    common.add_argument("--seed", type=int, help="seed for every random choice of the run")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic chat log and labels")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", parents=[common], help="aggregate events into pair records")
    p.add_argument("--events", required=True)
    p.add_argument("--labels")
    p.add_argument("--thresholds", help="activity thresholds JSON (default: 1/3, 2/3 quantiles)")
    p.add_argument("--out", required=True, help="pair CSV")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", parents=[common], help="split, train with early stopping, evaluate")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="F1 of a saved model on labelled pairs")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", help="report JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", parents=[common], help="subscription probabilities for pairs")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("leakage-demo", parents=[common], help="naive vs ordered encoding of a row id")
    p.add_argument("--m", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_leakage)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = RunConfig.load(args.config, args.overrides, args.seed)
        out = Outputs()
        message = args.func(args, config, out)
        out.commit()
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}, sort_keys=True), file=sys.stderr)
        return 1
    if message:
        print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
