"""Columnar (X, y) tables with numeric and categorical columns.

Categorical columns store integer codes into a :class:`LevelDictionary`
built in first-appearance order, so re-ingesting the same file always
produces the same codes.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

MISSING_LEVEL = "__missing__"


class SchemaError(ValueError):
    """A column is missing, duplicated or of the wrong kind."""


class ParseError(ValueError):
    """A cell could not be parsed; carries the 1-based data row number."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class EmptyDataError(ValueError):
    pass


class ColumnKind(str, Enum):
    NUMERIC = "numeric"
    CATEGORICAL = "categorical"


class LevelDictionary:
    """Bijection between level strings and dense integer codes."""

    def __init__(self, levels: Iterable[str] = ()):
        self._levels: list[str] = []
        self._index: dict[str, int] = {}
        for level in levels:
            if level in self._index:
                raise ValueError(f"duplicate level {level!r}")
            self.add(level)

    def add(self, level: str) -> int:
        code = self._index.get(level)
        if code is None:
            code = len(self._levels)
            self._levels.append(level)
            self._index[level] = code
        return code

    def code(self, level: str) -> int:
        """Return the code of ``level`` or -1 if it is not in the dictionary."""
        return self._index.get(level, -1)

    def level(self, code: int) -> str:
        return self._levels[code]

    @property
    def levels(self) -> list[str]:
        return list(self._levels)

    @property
    def k(self) -> int:
        return len(self._levels)

    def __len__(self) -> int:
        return len(self._levels)

    def __contains__(self, level: object) -> bool:
        return level in self._index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, LevelDictionary) and self._levels == other._levels

    def __repr__(self) -> str:
        return f"LevelDictionary(k={self.k})"

    @classmethod
    def encode(cls, values: Iterable[str]) -> tuple["LevelDictionary", np.ndarray]:
        """Build a dictionary in first-appearance order and the matching codes."""
        dictionary = cls()
        codes = [dictionary.add(MISSING_LEVEL if v is None or v == "" else v) for v in values]
        return dictionary, np.asarray(codes, dtype=np.int64)


@dataclass(frozen=True)
class Column:
    name: str
    kind: ColumnKind
    values: np.ndarray
    levels: LevelDictionary | None = None

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 1:
            raise SchemaError(f"column {self.name!r} must be one-dimensional")
        if self.kind is ColumnKind.NUMERIC:
            values = values.astype(np.float64)
            if not np.all(np.isfinite(values)):
                raise ParseError(f"column {self.name!r} holds non-finite values")
            if self.levels is not None:
                raise SchemaError(f"numeric column {self.name!r} cannot carry levels")
        else:
            if self.levels is None:
                raise SchemaError(f"categorical column {self.name!r} needs a level dictionary")
            values = values.astype(np.int64)
            if values.size and (values.min() < 0 or values.max() >= self.levels.k):
                raise SchemaError(f"column {self.name!r} has codes outside its dictionary")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def numeric(cls, name: str, values: Sequence[float] | np.ndarray) -> "Column":
        return cls(name, ColumnKind.NUMERIC, np.asarray(values, dtype=np.float64))

    @classmethod
    def categorical(cls, name: str, values: Iterable[str]) -> "Column":
        levels, codes = LevelDictionary.encode(values)
        return cls(name, ColumnKind.CATEGORICAL, codes, levels)

    @property
    def is_categorical(self) -> bool:
        return self.kind is ColumnKind.CATEGORICAL

    def strings(self) -> list[str]:
        """Level strings of a categorical column, row by row."""
        if not self.is_categorical:
            raise SchemaError(f"column {self.name!r} is numeric")
        levels = self.levels.levels
        return [levels[c] for c in self.values]

    def take(self, rows: np.ndarray) -> "Column":
        # sub-selection keeps the parent's dictionary so codes stay comparable
        return Column(self.name, self.kind, self.values[rows], self.levels)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class DesignMatrix:
    """Ordered columns plus a binary target vector."""

    columns: tuple[Column, ...]
    target: np.ndarray
    _by_name: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        columns = tuple(self.columns)
        target = np.asarray(self.target)
        if target.ndim != 1:
            raise SchemaError("target must be one-dimensional")
        if target.size and not np.all((target == 0) | (target == 1)):
            raise ParseError("target entries must be 0 or 1")
        target = target.astype(np.int8)
        target.setflags(write=False)
        by_name = {}
        for column in columns:
            if column.name in by_name:
                raise SchemaError(f"duplicate column name {column.name!r}")
            if len(column) != target.size:
                raise SchemaError(
                    f"column {column.name!r} has {len(column)} rows, target has {target.size}"
                )
            by_name[column.name] = column
        object.__setattr__(self, "columns", columns)
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "_by_name", by_name)

    @property
    def m(self) -> int:
        return int(self.target.size)

    @property
    def n(self) -> int:
        return len(self.columns)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def schema(self) -> dict[str, ColumnKind]:
        return {c.name: c.kind for c in self.columns}

    def __getitem__(self, name: str) -> Column:
        try:
            return self._by_name[name]
        except KeyError:
            raise SchemaError(f"unknown column {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def categorical(self, name: str) -> Column:
        column = self[name]
        if not column.is_categorical:
            raise SchemaError(f"column {name!r} is numeric, expected categorical")
        return column

    def take(self, rows: Sequence[int] | np.ndarray) -> "DesignMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        return DesignMatrix(tuple(c.take(rows) for c in self.columns), self.target[rows])

    def select(self, names: Sequence[str]) -> "DesignMatrix":
        return DesignMatrix(tuple(self[name] for name in names), self.target)

    def with_target(self, target: Sequence[int] | np.ndarray) -> "DesignMatrix":
        return DesignMatrix(self.columns, np.asarray(target))

    @classmethod
    def from_rows(
        cls,
        rows: Sequence[Mapping[str, object]],
        schema: Mapping[str, ColumnKind | str],
        target_name: str,
    ) -> "DesignMatrix":
        """Build from dict rows already holding Python values."""
        columns = []
        for name, kind in schema.items():
            kind = ColumnKind(kind)
            values = [row[name] for row in rows]
            if kind is ColumnKind.NUMERIC:
                columns.append(Column.numeric(name, np.asarray(values, dtype=np.float64)))
            else:
                columns.append(Column.categorical(name, [None if v is None else str(v) for v in values]))
        target = np.asarray([int(row[target_name]) for row in rows], dtype=np.int64)
        return cls(tuple(columns), target)


def global_mean(dm: DesignMatrix) -> float:
    """Mean target value of the whole matrix."""
    if dm.m == 0:
        raise EmptyDataError("global mean of an empty design matrix")
    return float(np.sum(dm.target, dtype=np.int64)) / dm.m


def column_level_counts(dm: DesignMatrix, col: str) -> dict[str, int]:
    """Number of occurrences of every dictionary level, zero for unused levels."""
    column = dm.categorical(col)
    counts = np.bincount(column.values, minlength=column.levels.k)
    return {level: int(c) for level, c in zip(column.levels.levels, counts)}


def _parse_rows(reader, schema, target_name, source):
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError(f"{source}: missing header row") from None
    position = {name: i for i, name in enumerate(header)}
    for name in list(schema) + [target_name]:
        if name not in position:
            raise SchemaError(f"{source}: column {name!r} not in header")

    raw = {name: [] for name in schema}
    target = []
    t_pos = position[target_name]
    for row_no, row in enumerate(reader, start=1):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", row_no)
        token = row[t_pos].strip()
        if token not in ("0", "1"):
            raise ParseError(f"target {target_name!r} must be 0 or 1, got {token!r}", row_no)
        target.append(int(token))
        for name, kind in schema.items():
            cell = row[position[name]]
            if kind is ColumnKind.NUMERIC:
                try:
                    value = float(cell)
                except ValueError:
                    raise ParseError(f"non-numeric value {cell!r} in column {name!r}", row_no) from None
                if not np.isfinite(value):
                    raise ParseError(f"non-finite value {cell!r} in column {name!r}", row_no)
                raw[name].append(value)
            else:
                raw[name].append(cell)

    columns = []
    for name, kind in schema.items():
        if kind is ColumnKind.NUMERIC:
            columns.append(Column.numeric(name, np.asarray(raw[name], dtype=np.float64)))
        else:
            columns.append(Column.categorical(name, raw[name]))
    return DesignMatrix(tuple(columns), np.asarray(target, dtype=np.int64))


def ingest_csv(
    path: str | os.PathLike,
    schema: Mapping[str, ColumnKind | str],
    target_name: str,
) -> DesignMatrix:
    """Read a UTF-8, comma separated file with a header row.

    ``schema`` maps column names to their kind; columns of the file that are
    not in the schema are ignored. Empty categorical cells become the
    ``__missing__`` level.
    """
    schema = {name: ColumnKind(kind) for name, kind in schema.items()}
    with open(path, newline="", encoding="utf-8") as fh:
        return _parse_rows(csv.reader(fh), schema, target_name, os.fspath(path))


def ingest_csv_text(text: str, schema, target_name: str) -> DesignMatrix:
    schema = {name: ColumnKind(kind) for name, kind in schema.items()}
    return _parse_rows(csv.reader(io.StringIO(text)), schema, target_name, "<text>")


def to_csv_text(dm: DesignMatrix, target_name: str = "y") -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(dm.names + [target_name])
    cells = []
    for column in dm.columns:
        if column.is_categorical:
            cells.append(column.strings())
        else:
            cells.append([repr(float(v)) for v in column.values])
    for i in range(dm.m):
        writer.writerow([col[i] for col in cells] + [int(dm.target[i])])
    return buf.getvalue()


def write_csv(dm: DesignMatrix, path: str | os.PathLike, target_name: str = "y") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(to_csv_text(dm, target_name))
