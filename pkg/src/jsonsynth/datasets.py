"""Bundled corpora and synthetic fixtures."""

from __future__ import annotations

import gzip
import json
from importlib import resources

import numpy as np

from .errors import CorpusError

MOVIES = [
    {"title": "Flash Gordon", "genres": ["Action", "Adventure", "Sci-Fi"], "awards": {"wins": 3, "nominations": 8}},
    {"title": "Tron", "genres": ["Action", "Sci-Fi"], "awards": {"wins": "unknown"}},
]

BRANCHES = ("a", "b", "c", "d")
SIDES = ("left", "right")


def movies() -> list[dict]:
    """The two-record movie corpus (mixed-type and partially present keys)."""
    return json.loads(json.dumps(MOVIES))


def nested_bernoulli_paths() -> list[tuple]:
    return [(b, s, "val") for b in BRANCHES for s in SIDES]


def nested_bernoulli_probs() -> dict[tuple, float]:
    """Eight leaf paths with parameters evenly spaced over [0.05, 0.95]."""
    ps = np.linspace(0.05, 0.95, 8)
    return {p: float(q) for p, q in zip(nested_bernoulli_paths(), ps)}


def nested_bernoulli(n: int = 5000, seed: int = 0) -> list[dict]:
    """Records ``{a..d: {left, right: {val: bool}}}``; every leaf is named ``val``."""
    rng = np.random.default_rng(seed)
    probs = nested_bernoulli_probs()
    draws = {p: rng.random(n) < q for p, q in probs.items()}
    out = []
    for i in range(n):
        out.append({b: {s: {"val": bool(draws[(b, s, "val")][i])} for s in SIDES} for b in BRANCHES})
    return out


def path_marginals(records: list[dict], paths=None) -> dict[tuple, float]:
    """Share of records whose value at each path is ``True``."""
    paths = paths or nested_bernoulli_paths()
    out = {}
    for p in paths:
        hits = 0
        for r in records:
            v = r
            for k in p:
                v = v.get(k) if isinstance(v, dict) else None
            hits += v is True
        out[p] = hits / max(len(records), 1)
    return out


def load_adult(split: str | None = None) -> list[dict]:
    """UCI Adult census records; ``split`` is ``"train"``, ``"test"`` or None for both."""
    if split not in (None, "train", "test"):
        raise ValueError(f"unknown split {split!r}")
    ref = resources.files("jsonsynth") / "data" / "adult.jsonl.gz"
    out = []
    with ref.open("rb") as raw, gzip.open(raw, "rt", encoding="utf-8") as f:
        for line in f:
            row = json.loads(line)
            if split is None or row["split"] == split:
                out.append(row["record"])
    return out


def subsample(records: list, n: int, seed: int = 0) -> list:
    if n > len(records):
        raise CorpusError(f"asked for {n} records, only {len(records)} available")
    idx = np.random.default_rng(seed).choice(len(records), size=n, replace=False)
    return [records[i] for i in sorted(idx)]


def read_jsonl(path) -> list[dict]:
    """Records of a JSON Lines file; errors carry the line number."""
    out = []
    try:
        f = open(path, encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read {path}: {exc}") from exc
    with f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise CorpusError(f"{path}:{lineno}: record is not a JSON object")
            out.append(rec)
    if not out:
        raise CorpusError(f"{path}: no records")
    return out


def write_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, ensure_ascii=False))
            f.write("\n")
