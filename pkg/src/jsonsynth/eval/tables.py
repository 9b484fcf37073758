"""Flattening and type separation of JSON corpora into shared tabular layouts.

Flattening turns every leaf primitive into a dot-path column (array elements
get numeric segments). A key that is absent from a record is *missing*, which
is kept distinct from an explicit ``null``. Type separation then splits each
column into a per-row dtype label and per-kind value columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np
import pandas as pd

from ..tokenizer import is_number

DTYPES = ("num", "cat", "bool", "null", "missing")
VALUE_KINDS = ("num", "cat", "bool")
TRAINING, EVALUATION = "training", "evaluation"


def dtype_of(v: Any) -> str:
    if v is None:
        return "null"
    if isinstance(v, bool):
        return "bool"
    if is_number(v):
        return "num"
    return "cat"


@dataclass
class FlatTable:
    columns: list[str]
    rows: list[dict]  # column -> primitive; absent = structurally missing
    array_lengths: list[dict]  # array dot-path -> length
    array_paths: list[str]

    def __len__(self) -> int:
        return len(self.rows)


def _flatten_into(value, prefix: str, leaves: dict, alens: dict) -> None:
    if isinstance(value, dict):
        for k, v in value.items():
            _flatten_into(v, f"{prefix}.{k}" if prefix else str(k), leaves, alens)
    elif isinstance(value, list):
        alens[prefix] = len(value)
        for i, v in enumerate(value):
            _flatten_into(v, f"{prefix}.{i}", leaves, alens)
    else:
        leaves[prefix] = value


def flatten(corpus: Iterable[dict]) -> FlatTable:
    """One column per distinct leaf path, in order of first appearance."""
    columns: dict[str, None] = {}
    arrays: dict[str, None] = {}
    rows, lengths = [], []
    for record in corpus:
        leaves, alens = {}, {}
        _flatten_into(record, "", leaves, alens)
        for c in leaves:
            columns.setdefault(c, None)
        for a in alens:
            arrays.setdefault(a, None)
        rows.append(leaves)
        lengths.append(alens)
    return FlatTable(list(columns), rows, lengths, list(arrays))


@dataclass
class ColumnLayout:
    """Column schema shared by every table compared against each other."""

    columns: list[str]
    array_paths: list[str]
    kinds: dict = field(default_factory=dict)  # column -> set of dtypes seen (incl. missing)
    categories: dict = field(default_factory=dict)  # column -> sorted category labels

    @classmethod
    def from_tables(cls, *tables: FlatTable) -> "ColumnLayout":
        columns: dict[str, None] = {}
        arrays: dict[str, None] = {}
        kinds: dict[str, set] = {}
        cats: dict[str, set] = {}
        for t in tables:
            for c in t.columns:
                columns.setdefault(c, None)
            for a in t.array_paths:
                arrays.setdefault(a, None)
        for t in tables:
            for c in columns:
                ks = kinds.setdefault(c, set())
                cs = cats.setdefault(c, set())
                for row in t.rows:
                    if c not in row:
                        ks.add("missing")
                        continue
                    v = row[c]
                    d = dtype_of(v)
                    ks.add(d)
                    if d == "cat":
                        cs.add(str(v))
        return cls(
            list(columns),
            list(arrays),
            kinds,
            {c: sorted(s) for c, s in cats.items()},
        )

    def is_plain(self, column: str) -> bool:
        """Homogeneous (one value kind) and present in every row of every table."""
        ks = self.kinds.get(column, set())
        return len(ks) == 1 and next(iter(ks)) in VALUE_KINDS

    def value_kinds(self, column: str) -> list[str]:
        return [k for k in VALUE_KINDS if k in self.kinds.get(column, ())]

    def alen_source(self, array_path: str) -> str:
        return f"{array_path}.alen"


@dataclass
class SourceColumn:
    """Per-row dtype label plus one value array per kind (undefined elsewhere)."""

    name: str
    dtype: np.ndarray  # object array of DTYPES labels
    num: np.ndarray  # float64, NaN unless dtype == "num"
    cat: np.ndarray  # object, None unless dtype == "cat"
    bool: np.ndarray  # object, None unless dtype == "bool"
    is_alen: bool = False

    @property
    def present(self) -> np.ndarray:
        return self.dtype != "missing"

    def values(self, kind: str) -> np.ndarray:
        return getattr(self, kind)

    def defined(self, kind: str) -> np.ndarray:
        return self.dtype == kind


def _source_from_rows(name: str, rows: list[dict]) -> SourceColumn:
    n = len(rows)
    dtype = np.empty(n, dtype=object)
    num = np.full(n, np.nan)
    cat = np.full(n, None, dtype=object)
    bl = np.full(n, None, dtype=object)
    for i, row in enumerate(rows):
        if name not in row:
            dtype[i] = "missing"
            continue
        v = row[name]
        d = dtype_of(v)
        dtype[i] = d
        if d == "num":
            num[i] = float(v)
        elif d == "cat":
            cat[i] = str(v)
        elif d == "bool":
            bl[i] = "true" if v else "false"
    return SourceColumn(name, dtype, num, cat, bl)


def _alen_source(name: str, path: str, lengths: list[dict]) -> SourceColumn:
    n = len(lengths)
    dtype = np.array(["num" if path in d else "missing" for d in lengths], dtype=object)
    num = np.array([float(d[path]) if path in d else np.nan for d in lengths])
    empty = np.full(n, None, dtype=object)
    return SourceColumn(name, dtype, num, empty, empty.copy(), is_alen=True)


@dataclass
class TypedTable:
    """Type-separated view of one corpus under a shared :class:`ColumnLayout`."""

    layout: ColumnLayout
    mode: str
    sources: dict  # source name -> SourceColumn
    n_rows: int

    def __len__(self) -> int:
        return self.n_rows

    def frame_columns(self, source: str) -> list[tuple[str, str]]:
        """``(frame column, kind)`` pairs for a source; kind is a value kind or ``dtype``."""
        col = self.sources[source]
        if col.is_alen:
            return [(source, "num")]
        kinds = self.layout.value_kinds(source)
        if self.mode == TRAINING and self.layout.is_plain(source):
            return [(source, kinds[0])]
        return [(f"{source}.dtype", "dtype")] + [(f"{source}.{k}", k) for k in kinds]

    def frame(self, exclude: Iterable[str] = ()) -> pd.DataFrame:
        """Model-ready frame: floats for numerics, union-categoried categoricals."""
        exclude = set(exclude)
        data = {}
        for source, col in self.sources.items():
            if source in exclude:
                continue
            for name, kind in self.frame_columns(source):
                if kind == "num":
                    data[name] = col.num
                elif kind == "dtype":
                    data[name] = pd.Categorical(col.dtype, categories=list(DTYPES))
                elif kind == "cat":
                    data[name] = pd.Categorical(col.cat, categories=self.layout.categories[source])
                else:
                    data[name] = pd.Categorical(col.bool, categories=["false", "true"])
        return pd.DataFrame(data, index=pd.RangeIndex(self.n_rows))


def type_separate(table: FlatTable, mode: str = EVALUATION, layout: ColumnLayout | None = None) -> TypedTable:
    """Expand columns into dtype + per-kind sub-columns.

    ``training`` mode only expands heterogeneous or partially present columns;
    ``evaluation`` mode expands everything and adds one ``.alen`` source per
    array path.
    """
    if mode not in (TRAINING, EVALUATION):
        raise ValueError(f"unknown mode {mode!r}")
    layout = layout or ColumnLayout.from_tables(table)
    sources = {c: _source_from_rows(c, table.rows) for c in layout.columns}
    if mode == EVALUATION:
        for a in layout.array_paths:
            name = layout.alen_source(a)
            sources[name] = _alen_source(name, a, table.array_lengths)
    return TypedTable(layout, mode, sources, len(table))


def separate(*corpora, mode: str = EVALUATION) -> list[TypedTable]:
    """Flatten and type-separate several corpora under one shared layout."""
    flats = [flatten(c) for c in corpora]
    layout = ColumnLayout.from_tables(*flats)
    return [type_separate(f, mode, layout) for f in flats]
