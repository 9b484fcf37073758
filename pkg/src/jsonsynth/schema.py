"""Corpus-derived schema, its compiled mask table, and numeric post-processing.

Constraints are keyed by wildcarded key path (array indices replaced by
``STAR``). Path-dependent constraints (types, enums, allowed keys) compile to
one boolean row per path. Count-dependent ones (required, item counts,
uniqueness) are left to the sampler.
"""

from __future__ import annotations

import copy
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

from .errors import CorpusError, SchemaError
from .tokenizer import (
    ARR_END,
    ARR_START,
    DEFAULT_TAU,
    END,
    NUM,
    OBJ_END,
    OBJ_START,
    STAR,
    KeyPath,
    NumericScalers,
    TokenStream,
    VocabSpec,
    format_path,
    is_number,
    value_key,
    walk,
    wildcard,
)

KINDS = ("string", "integer", "number", "boolean", "null", "object", "array")
PRIMITIVE_KINDS = ("string", "integer", "number", "boolean", "null")


def json_kind(v: Any) -> str:
    if v is None:
        return "null"
    if isinstance(v, bool):
        return "boolean"
    if isinstance(v, int):
        return "integer"
    if isinstance(v, float):
        return "number"
    if isinstance(v, str):
        return "string"
    if isinstance(v, list):
        return "array"
    if isinstance(v, dict):
        return "object"
    raise TypeError(f"not a JSON value: {v!r}")


def canonical(v: Any):
    """Hashable identity matching JSON equality (``1 == 1.0``, ``true != 1``)."""
    if isinstance(v, dict):
        return ("o", tuple(sorted((k, canonical(x)) for k, x in v.items())))
    if isinstance(v, list):
        return ("a", tuple(canonical(x) for x in v))
    return value_key(v)


@dataclass
class PathConstraints:
    kinds: set = field(default_factory=set)
    enum: list | None = None
    properties: list = field(default_factory=list)
    required: list = field(default_factory=list)
    min_items: int | None = None
    max_items: int | None = None
    unique_items: bool = False
    minimum: float | None = None
    maximum: float | None = None
    scaled: bool = False

    @property
    def integer_only(self) -> bool:
        return "integer" in self.kinds and "number" not in self.kinds

    def enum_keys(self) -> set | None:
        return None if self.enum is None else {value_key(v) for v in self.enum}


@dataclass
class DerivedSchema:
    paths: dict  # wildcarded KeyPath -> PathConstraints
    tau: int = DEFAULT_TAU

    def __getitem__(self, path: KeyPath) -> PathConstraints:
        return self.paths[wildcard(path)]

    def get(self, path: KeyPath) -> PathConstraints | None:
        return self.paths.get(wildcard(path))

    def __contains__(self, path: KeyPath) -> bool:
        return wildcard(path) in self.paths

    def __len__(self) -> int:
        return len(self.paths)

    def to_json_schema(self) -> dict:
        doc = {"$schema": "https://json-schema.org/draft/2020-12/schema"}
        doc.update(self._node(()))
        doc["x-tau"] = self.tau
        return doc

    def _node(self, path: KeyPath) -> dict:
        c = self.paths[path]
        container: dict = {}
        if "object" in c.kinds or path == ():
            container["properties"] = {k: self._node(path + (k,)) for k in c.properties}
            container["required"] = list(c.required)
            container["additionalProperties"] = False
        if "array" in c.kinds:
            item_path = path + (STAR,)
            item = self.paths.get(item_path)
            container["items"] = self._node(item_path) if item and item.kinds else False
            container["minItems"] = c.min_items
            container["maxItems"] = c.max_items
            if c.unique_items:
                container["uniqueItems"] = True
        scalar: dict = {}
        if c.minimum is not None:
            scalar["minimum"] = c.minimum
            scalar["maximum"] = c.maximum
        if c.scaled:
            scalar["x-scaled"] = True
        kinds = [k for k in KINDS if k in c.kinds]
        if c.enum is not None and ("object" in c.kinds or "array" in c.kinds):
            prim = [k for k in kinds if k in PRIMITIVE_KINDS]
            cont = [k for k in kinds if k not in PRIMITIVE_KINDS]
            return {
                "anyOf": [
                    {"type": prim, "enum": list(c.enum), **scalar},
                    {"type": cont, **container},
                ]
            }
        node: dict = {"type": kinds}
        if c.enum is not None:
            node["enum"] = list(c.enum)
        node.update(scalar)
        node.update(container)
        return node

    @classmethod
    def from_json_schema(cls, doc: dict) -> "DerivedSchema":
        paths: dict = {}

        def visit(node, path):
            c = paths[path] = PathConstraints()  # parents come before their items
            parts = node["anyOf"] if "anyOf" in node else [node]
            for part in parts:
                c.kinds.update(part.get("type", []))
                if "enum" in part:
                    c.enum = list(part["enum"])
                if "minimum" in part:
                    c.minimum, c.maximum = part["minimum"], part["maximum"]
                c.scaled = c.scaled or part.get("x-scaled", False)
                if "properties" in part:
                    c.properties = list(part["properties"])
                    c.required = list(part.get("required", []))
                if "items" in part or "minItems" in part:
                    c.min_items, c.max_items = part.get("minItems"), part.get("maxItems")
                    c.unique_items = part.get("uniqueItems", False)
                    items = part.get("items")
                    if isinstance(items, dict):
                        visit(items, path + (STAR,))
                    else:
                        paths[path + (STAR,)] = PathConstraints()
            for part in parts:
                for k, sub in part.get("properties", {}).items():
                    visit(sub, path + (k,))

        visit(doc, ())
        return cls(paths, doc.get("x-tau", DEFAULT_TAU))


def derive_schema(corpus: Iterable[dict], tau: int = DEFAULT_TAU) -> DerivedSchema:
    paths: dict = {(): PathConstraints(kinds={"object"})}
    n_objects: dict = defaultdict(int)
    key_counts: dict = defaultdict(lambda: defaultdict(int))
    primitives: dict = defaultdict(dict)
    lengths: dict = defaultdict(list)
    all_unique: dict = defaultdict(lambda: True)
    n = 0
    for n, record in enumerate(corpus, 1):
        if not isinstance(record, dict):
            raise CorpusError(f"records must be JSON objects (record {n})")
        for path, v in walk(record):
            wp = wildcard(path)
            c = paths.get(wp)
            if c is None:
                c = paths[wp] = PathConstraints()
            c.kinds.add(json_kind(v))
            if isinstance(v, dict):
                n_objects[wp] += 1
                for k in v:
                    if k not in c.properties:
                        c.properties.append(k)
                    key_counts[wp][k] += 1
            elif isinstance(v, list):
                lengths[wp].append(len(v))
                paths.setdefault(wp + (STAR,), PathConstraints())
                if all_unique[wp] and len({canonical(x) for x in v}) != len(v):
                    all_unique[wp] = False
            else:
                if is_number(v):
                    if not math.isfinite(v):
                        raise CorpusError(f"non-finite number at {format_path(path)}")
                    c.minimum = v if c.minimum is None else min(c.minimum, v)
                    c.maximum = v if c.maximum is None else max(c.maximum, v)
                primitives[wp].setdefault(value_key(v), v)
    if n == 0:
        raise CorpusError("corpus is empty")
    for wp, c in paths.items():
        if wp in n_objects:
            c.required = [k for k in c.properties if key_counts[wp][k] == n_objects[wp]]
        if wp in lengths:
            c.min_items, c.max_items = min(lengths[wp]), max(lengths[wp])
            c.unique_items = all_unique[wp]
        seen = primitives.get(wp)
        if seen and len(seen) <= tau:
            c.enum = list(seen.values())
    return DerivedSchema(paths, tau)


def transform_schema_scaled(schema: DerivedSchema, scalers: NumericScalers) -> DerivedSchema:
    """Schema in the model's space: scaled paths lose enums, bounds are standardized."""
    out = copy.deepcopy(schema)
    for p, scaler in scalers.by_path.items():
        c = out.paths.get(p)
        if c is None:
            raise SchemaError(f"scaler for {format_path(p)} has no schema entry")
        c.scaled = True
        c.enum = None
        if c.minimum is None:
            raise SchemaError(f"scaled path {format_path(p)} has no numeric bounds")
        c.minimum = scaler.scale(c.minimum)
        c.maximum = scaler.scale(c.maximum)
    return out


class SchemaMaskTable:
    """Row 0 is all-ones; row ``i`` holds the mask for the ``i``-th schema path."""

    def __init__(self, matrix: np.ndarray, rows: dict):
        self.matrix = matrix
        self.rows = rows

    @property
    def n_paths(self) -> int:
        return self.matrix.shape[0] - 1

    def row(self, path: KeyPath | None) -> int:
        if path is None:
            return 0
        return self.rows.get(wildcard(path), 0)

    def mask(self, path: KeyPath | None) -> np.ndarray:
        return self.matrix[self.row(path)]


def _value_tokens_by_kind(vocab: VocabSpec) -> dict:
    by_kind = defaultdict(list)
    for tid in vocab.value_range:
        v = vocab.value_of(tid)
        kind = json_kind(v)
        if kind in ("integer", "number"):
            by_kind["number"].append(tid)
            if float(v).is_integer():
                by_kind["integer"].append(tid)
        else:
            by_kind[kind].append(tid)
    return by_kind


def compile_mask_table(schema: DerivedSchema, vocab: VocabSpec) -> SchemaMaskTable:
    by_kind = _value_tokens_by_kind(vocab)
    numeric_ids = set(by_kind["number"])
    paths = list(schema.paths)
    matrix = np.zeros((len(paths) + 1, vocab.size), dtype=bool)
    matrix[0] = True
    rows = {}
    for i, p in enumerate(paths, 1):
        rows[p] = i
        c = schema.paths[p]
        row = matrix[i]
        if p == ():
            row[END] = True
        if "object" in c.kinds:
            row[OBJ_START] = True
        if "object" in c.kinds or p == ():
            row[OBJ_END] = p != ()
            for k in c.properties:
                row[vocab.key_ids[k]] = True
        if "array" in c.kinds:
            row[ARR_START] = True
        if p and p[-1] == STAR and isinstance(p[-1], int):
            row[ARR_END] = True
        if c.scaled:
            row[NUM] = True
        if c.enum is not None:
            for v in c.enum:
                tid = vocab.value_id(v)
                if tid is None:
                    raise SchemaError(f"enum value {v!r} at {format_path(p)} missing from vocabulary")
                if not (c.scaled and tid in numeric_ids):
                    row[tid] = True
        else:
            for kind in c.kinds & set(PRIMITIVE_KINDS):
                for tid in by_kind.get(kind, ()):
                    if not (c.scaled and tid in numeric_ids):
                        row[tid] = True
    return SchemaMaskTable(matrix, rows)


def schema_rows_for_sequence(stream: TokenStream, table: SchemaMaskTable) -> np.ndarray:
    """Row governing token ``t + 1`` for each position ``t`` (row 0 at the end)."""
    rows = np.zeros(len(stream), dtype=np.int64)
    for t in range(len(stream) - 1):
        rows[t] = table.row(stream.paths[t + 1])
    return rows


def schema_masks_for_sequence(stream: TokenStream, table: SchemaMaskTable) -> np.ndarray:
    return table.matrix[schema_rows_for_sequence(stream, table)]


def _round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def postprocess_value(value: float, constraints: PathConstraints | None):
    """Clip to bounds, snap to the nearest enum member, else round integers."""
    if constraints is None:
        return value
    x = float(value)
    if constraints.minimum is not None:
        x = min(max(x, constraints.minimum), constraints.maximum)
    if constraints.enum is not None:
        candidates = [v for v in constraints.enum if is_number(v)]
        if candidates:
            # ties resolve to the smaller value
            return min(candidates, key=lambda v: (abs(x - v), v))
    if constraints.integer_only:
        return _round_half_away(x)
    return x


def postprocess_record(record: Any, schema: DerivedSchema, path: KeyPath = ()) -> Any:
    if isinstance(record, dict):
        return {k: postprocess_record(v, schema, path + (k,)) for k, v in record.items()}
    if isinstance(record, list):
        return [postprocess_record(v, schema, path + (i,)) for i, v in enumerate(record)]
    if is_number(record):
        return postprocess_value(record, schema.get(path))
    return record


@dataclass(frozen=True)
class Violation:
    path: str
    keyword: str
    message: str


def _kind_ok(v: Any, kinds: set) -> bool:
    k = json_kind(v)
    if k in kinds:
        return True
    if k == "integer" and "number" in kinds:
        return True
    return k == "number" and "integer" in kinds and float(v).is_integer()


def validate(record: Any, schema: DerivedSchema) -> list[Violation]:
    """Every constraint breach in ``record``; empty means conformant."""
    out: list[Violation] = []

    def add(path, keyword, message):
        out.append(Violation(format_path(path), keyword, message))

    def visit(v, path):
        c = schema.get(path)
        if c is None:
            add(path, "additionalProperties", "path not in schema")
            return
        if not _kind_ok(v, c.kinds):
            add(path, "type", f"{json_kind(v)} not in {sorted(c.kinds)}")
            return
        if isinstance(v, dict):
            allowed = set(c.properties)
            for k in v:
                if k not in allowed:
                    add(path + (k,), "additionalProperties", f"unexpected key {k!r}")
            for k in c.required:
                if k not in v:
                    add(path, "required", f"missing key {k!r}")
            for k, x in v.items():
                if k in allowed:
                    visit(x, path + (k,))
        elif isinstance(v, list):
            if c.min_items is not None and len(v) < c.min_items:
                add(path, "minItems", f"{len(v)} < {c.min_items}")
            if c.max_items is not None and len(v) > c.max_items:
                add(path, "maxItems", f"{len(v)} > {c.max_items}")
            if c.unique_items and len({canonical(x) for x in v}) != len(v):
                add(path, "uniqueItems", "duplicate elements")
            for i, x in enumerate(v):
                visit(x, path + (i,))
        else:
            if c.enum is not None and value_key(v) not in c.enum_keys():
                add(path, "enum", f"{v!r} not in enum")
            if is_number(v) and c.minimum is not None:
                if v < c.minimum:
                    add(path, "minimum", f"{v} < {c.minimum}")
                if v > c.maximum:
                    add(path, "maximum", f"{v} > {c.maximum}")

    if not isinstance(record, dict):
        add((), "type", "record is not an object")
    else:
        visit(record, ())
    return out
