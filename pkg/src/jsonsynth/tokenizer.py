"""Serialize JSON records into key, value and structural tokens.

A record becomes ``START <members> END``. Nested objects are wrapped in
``OBJ_START ... OBJ_END`` and arrays in ``ARR_START ... ARR_END``. Numbers
under high-cardinality key paths are replaced by ``NUM`` and their
standardized magnitude travels in a parallel continuous channel.

Every token carries a key path (a tuple of ``str`` keys and ``int`` array
indices):

* key tokens and the delimiters of an object carry the path of that object,
* value tokens (including ``NUM``, ``OBJ_START`` and ``ARR_START``) carry the
  path of the slot they fill,
* ``ARR_END`` carries the slot path one past the last element, so the next
  token's path inside an array never depends on whether the array closes.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator

import numpy as np

from .errors import CorpusError, StructureError, VocabularyMiss

STRUCTURAL = ("PAD", "START", "END", "OBJ_START", "OBJ_END", "ARR_START", "ARR_END", "NUM")
PAD, START, END, OBJ_START, OBJ_END, ARR_START, ARR_END, NUM = range(len(STRUCTURAL))
N_STRUCTURAL = len(STRUCTURAL)

#: stands in for any array index in a wildcarded path
STAR = -1

DEFAULT_TAU = 64
DEFAULT_MAX_INDEX = 256
ARTIFACT_VERSION = 1

KeyPath = tuple  # of str | int


def wildcard(path: KeyPath) -> KeyPath:
    return tuple(STAR if isinstance(e, int) else e for e in path)


def path_to_json(path: KeyPath) -> list:
    return [None if e == STAR and isinstance(e, int) else e for e in path]


def path_from_json(items: list) -> KeyPath:
    return tuple(STAR if e is None else e for e in items)


def format_path(path: KeyPath) -> str:
    if not path:
        return "<root>"
    return ".".join("*" if e == STAR and isinstance(e, int) else str(e) for e in path)


def is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def value_key(v: Any) -> tuple:
    """Identity of a primitive for vocabulary purposes.

    Integers and equal-valued floats collapse; booleans never collapse with
    numbers.
    """
    if v is None:
        return ("null",)
    if isinstance(v, bool):
        return ("bool", v)
    if isinstance(v, (int, float)):
        return ("num", float(v))
    if isinstance(v, str):
        return ("str", v)
    raise TypeError(f"not a JSON primitive: {v!r}")


def walk(value: Any, path: KeyPath = ()) -> Iterator[tuple[KeyPath, Any]]:
    """Depth-first (path, node) pairs, containers included."""
    yield path, value
    if isinstance(value, dict):
        for k, v in value.items():
            yield from walk(v, path + (k,))
    elif isinstance(value, list):
        for i, v in enumerate(value):
            yield from walk(v, path + (i,))


def _check_record(record: Any, lineno: int | None = None) -> None:
    if not isinstance(record, dict):
        where = f" (record {lineno})" if lineno is not None else ""
        raise CorpusError(f"records must be JSON objects{where}, got {type(record).__name__}")


def _numeric_distinct(corpus: Iterable[dict]) -> dict[KeyPath, set]:
    """Distinct numeric values per wildcarded path; rejects non-finite input."""
    distinct: dict[KeyPath, set] = defaultdict(set)
    n = 0
    for n, record in enumerate(corpus, 1):
        _check_record(record, n)
        for path, v in walk(record):
            if is_number(v):
                if not math.isfinite(v):
                    raise CorpusError(f"non-finite number at {format_path(path)}")
                distinct[wildcard(path)].add(float(v))
    if n == 0:
        raise CorpusError("corpus is empty")
    return distinct


def scaled_paths(corpus: Iterable[dict], tau: int = DEFAULT_TAU) -> set[KeyPath]:
    """Wildcarded paths whose numeric values alone exceed ``tau`` distinct values."""
    return {p for p, s in _numeric_distinct(corpus).items() if len(s) > tau}


class VocabSpec:
    """Three disjoint id ranges: structural, then keys, then values."""

    def __init__(self, keys: Iterable[str], values: Iterable[Any]):
        self.keys = list(keys)
        self.values = list(values)
        self.key_ids = {k: N_STRUCTURAL + i for i, k in enumerate(self.keys)}
        offset = N_STRUCTURAL + len(self.keys)
        self.value_ids = {value_key(v): offset + i for i, v in enumerate(self.values)}
        if len(self.key_ids) != len(self.keys) or len(self.value_ids) != len(self.values):
            raise ValueError("duplicate vocabulary entries")
        self.structural_ids = {name: i for i, name in enumerate(STRUCTURAL)}

    @property
    def size(self) -> int:
        return N_STRUCTURAL + len(self.keys) + len(self.values)

    def __len__(self) -> int:
        return self.size

    @property
    def key_range(self) -> range:
        return range(N_STRUCTURAL, N_STRUCTURAL + len(self.keys))

    @property
    def value_range(self) -> range:
        start = N_STRUCTURAL + len(self.keys)
        return range(start, start + len(self.values))

    def is_key(self, token: int) -> bool:
        return N_STRUCTURAL <= token < N_STRUCTURAL + len(self.keys)

    def is_value(self, token: int) -> bool:
        return N_STRUCTURAL + len(self.keys) <= token < self.size

    def key_name(self, token: int) -> str:
        return self.keys[token - N_STRUCTURAL]

    def value_of(self, token: int) -> Any:
        return self.values[token - N_STRUCTURAL - len(self.keys)]

    def value_id(self, v: Any) -> int | None:
        return self.value_ids.get(value_key(v))

    def token_name(self, token: int) -> str:
        if token < N_STRUCTURAL:
            return STRUCTURAL[token]
        if self.is_key(token):
            return f"Key({self.key_name(token)})"
        if self.is_value(token):
            return f"Val({json.dumps(self.value_of(token))})"
        return f"<invalid {token}>"

    def to_dict(self) -> dict:
        return {
            "format": "jsonsynth.vocab",
            "version": ARTIFACT_VERSION,
            "structural": list(STRUCTURAL),
            "keys": self.keys,
            "values": self.values,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VocabSpec":
        if d.get("version") != ARTIFACT_VERSION or tuple(d.get("structural", ())) != STRUCTURAL:
            raise ValueError("incompatible vocabulary artifact")
        return cls(d["keys"], d["values"])

    def __eq__(self, other):
        return isinstance(other, VocabSpec) and self.to_dict() == other.to_dict()


def build_vocab(corpus: Iterable[dict], tau: int = DEFAULT_TAU) -> VocabSpec:
    """Keys and categorical values, each in order of first occurrence."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    corpus = list(corpus)
    scaled = {p for p, s in _numeric_distinct(corpus).items() if len(s) > tau}
    keys: dict[str, None] = {}
    values: dict[tuple, Any] = {}
    for record in corpus:
        for path, v in walk(record):
            if path and isinstance(path[-1], str):
                keys.setdefault(path[-1], None)
            if isinstance(v, (dict, list)):
                continue
            if is_number(v) and wildcard(path) in scaled:
                continue
            values.setdefault(value_key(v), v)
    return VocabSpec(keys, values.values())


@dataclass(frozen=True)
class Scaler:
    mean: float
    std: float
    minimum: float
    maximum: float
    n_distinct: int

    def scale(self, x: float) -> float:
        return (x - self.mean) / self.std

    def inverse(self, z: float) -> float:
        return z * self.std + self.mean


@dataclass
class NumericScalers:
    """Per-path standardization for high-cardinality numeric keys."""

    tau: int
    by_path: dict = field(default_factory=dict)

    def __contains__(self, path: KeyPath) -> bool:
        return wildcard(path) in self.by_path

    def get(self, path: KeyPath) -> Scaler | None:
        return self.by_path.get(wildcard(path))

    def __len__(self) -> int:
        return len(self.by_path)

    def to_dict(self) -> dict:
        return {
            "format": "jsonsynth.scalers",
            "version": ARTIFACT_VERSION,
            "tau": self.tau,
            "scalers": [
                {
                    "path": path_to_json(p),
                    "mean": s.mean,
                    "std": s.std,
                    "minimum": s.minimum,
                    "maximum": s.maximum,
                    "n_distinct": s.n_distinct,
                }
                for p, s in self.by_path.items()
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NumericScalers":
        if d.get("version") != ARTIFACT_VERSION:
            raise ValueError("incompatible scaler artifact")
        by_path = {}
        for item in d["scalers"]:
            item = dict(item)
            path = path_from_json(item.pop("path"))
            by_path[path] = Scaler(**item)
        return cls(d["tau"], by_path)


def fit_scalers(corpus: Iterable[dict], vocab: VocabSpec | None = None, tau: int = DEFAULT_TAU) -> NumericScalers:
    """Mean/std/min/max for every path with more than ``tau`` distinct numbers.

    Constant columns get ``std = 1`` so scaled values are identically zero.
    """
    corpus = list(corpus)
    distinct = _numeric_distinct(corpus)
    targets = {p for p, s in distinct.items() if len(s) > tau}
    samples: dict[KeyPath, list] = defaultdict(list)
    for record in corpus:
        for path, v in walk(record):
            if is_number(v):
                wp = wildcard(path)
                if wp in targets:
                    samples[wp].append(float(v))
    by_path = {}
    for p in sorted(targets, key=lambda p: [str(e) for e in p]):
        xs = np.asarray(samples[p], dtype=np.float64)
        std = float(xs.std())
        by_path[p] = Scaler(
            mean=float(xs.mean()),
            std=std if std > 0 else 1.0,
            minimum=float(xs.min()),
            maximum=float(xs.max()),
            n_distinct=len(distinct[p]),
        )
    if vocab is not None:
        for p in by_path:
            if p and isinstance(p[-1], str) and p[-1] not in vocab.key_ids:
                raise ValueError(f"vocabulary does not cover scaled key {format_path(p)}")
    return NumericScalers(tau, by_path)


@dataclass
class TokenStream:
    tokens: list
    paths: list
    continuous: list

    def __post_init__(self):
        if not len(self.tokens) == len(self.paths) == len(self.continuous):
            raise ValueError("token, path and continuous channels differ in length")

    def __len__(self) -> int:
        return len(self.tokens)


def encode(
    record: dict,
    vocab: VocabSpec,
    scalers: NumericScalers,
    max_index: int = DEFAULT_MAX_INDEX,
) -> TokenStream:
    _check_record(record)
    tokens: list[int] = []
    paths: list[KeyPath] = []
    cont: list[float | None] = []
    unknown: list[str] = []

    def emit(token, path, x=None):
        tokens.append(token)
        paths.append(path)
        cont.append(x)

    def visit_object(obj, path):
        for k, v in obj.items():
            kid = vocab.key_ids.get(k)
            if kid is None:
                unknown.append(f"key {k!r} at {format_path(path)}")
                kid = PAD
            emit(kid, path)
            visit_value(v, path + (k,))

    def visit_value(v, path):
        if isinstance(v, dict):
            emit(OBJ_START, path)
            visit_object(v, path)
            emit(OBJ_END, path)
        elif isinstance(v, list):
            if len(v) > max_index:
                raise CorpusError(f"array at {format_path(path)} has {len(v)} elements (max {max_index})")
            emit(ARR_START, path)
            for i, e in enumerate(v):
                visit_value(e, path + (i,))
            emit(ARR_END, path + (len(v),))
        else:
            if is_number(v):
                if not math.isfinite(v):
                    raise CorpusError(f"non-finite number at {format_path(path)}")
                scaler = scalers.get(path)
                if scaler is not None:
                    emit(NUM, path, scaler.scale(float(v)))
                    return
            vid = vocab.value_id(v)
            if vid is None:
                unknown.append(f"value {v!r} at {format_path(path)}")
                vid = PAD
            emit(vid, path)

    emit(START, ())
    visit_object(record, ())
    emit(END, ())
    if unknown:
        raise VocabularyMiss(unknown)
    return TokenStream(tokens, paths, cont)


def decode(stream: TokenStream, vocab: VocabSpec, scalers: NumericScalers) -> dict:
    """Inverse of :func:`encode`; scaled numerics come back as floats."""
    toks = stream.tokens
    n = len(toks)
    if n < 2 or toks[0] != START:
        raise StructureError("stream must begin with START", 0)

    def parse_members(i, closer):
        obj = {}
        while True:
            if i >= n:
                raise StructureError("unterminated object", i)
            t = toks[i]
            if t == closer:
                return obj, i + 1
            if not vocab.is_key(t):
                raise StructureError(f"expected key or {STRUCTURAL[closer]}, got {vocab.token_name(t)}", i)
            v, i = parse_value(i + 1)
            obj[vocab.key_name(t)] = v

    def parse_value(i):
        if i >= n:
            raise StructureError("missing value", i)
        t = toks[i]
        if t == OBJ_START:
            return parse_members(i + 1, OBJ_END)
        if t == ARR_START:
            items = []
            i += 1
            while True:
                if i >= n:
                    raise StructureError("unterminated array", i)
                if toks[i] == ARR_END:
                    return items, i + 1
                v, i = parse_value(i)
                items.append(v)
        if t == NUM:
            scaler = scalers.get(stream.paths[i])
            x = stream.continuous[i]
            if scaler is None or x is None:
                raise StructureError(f"NUM without scaler at {format_path(stream.paths[i])}", i)
            return scaler.inverse(float(x)), i + 1
        if vocab.is_value(t):
            return vocab.value_of(t), i + 1
        raise StructureError(f"expected a value, got {vocab.token_name(t)}", i)

    record, i = parse_members(1, END)
    if i != n:
        raise StructureError("tokens after END", i)
    return record


def shuffle_keys(value: Any, rng: np.random.Generator) -> Any:
    """Independently permute sibling keys at every object; arrays keep order."""
    if isinstance(value, dict):
        items = list(value.items())
        order = rng.permutation(len(items))
        return {items[j][0]: shuffle_keys(items[j][1], rng) for j in order}
    if isinstance(value, list):
        return [shuffle_keys(v, rng) for v in value]
    return value
