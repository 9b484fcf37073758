"""Array-length distributions and their Wasserstein-1 distance."""

from __future__ import annotations

import numpy as np


def wasserstein_1d(u, v) -> float:
    """Earth mover's distance between two empirical samples, via their CDFs."""
    u = np.sort(np.asarray(u, dtype=float))
    v = np.sort(np.asarray(v, dtype=float))
    if len(u) == 0 or len(v) == 0:
        raise ValueError("need non-empty samples")
    grid = np.sort(np.concatenate([u, v]))
    widths = np.diff(grid)
    cu = np.searchsorted(u, grid[:-1], side="right") / len(u)
    cv = np.searchsorted(v, grid[:-1], side="right") / len(v)
    return float(np.sum(np.abs(cu - cv) * widths))


def _instances(value, parts: list[str]):
    """Values at a dot-path; ``*`` matches every element of an array."""
    if not parts:
        yield value
        return
    head, rest = parts[0], parts[1:]
    if isinstance(value, dict):
        if head in value:
            yield from _instances(value[head], rest)
    elif isinstance(value, list):
        if head == "*":
            for v in value:
                yield from _instances(v, rest)
        elif head.isdigit() and int(head) < len(value):
            yield from _instances(value[int(head)], rest)


def array_lengths(corpus, path: str, absent_as_zero: bool = True) -> tuple[list[int], bool]:
    """Lengths of every array instance at ``path``; second item: path seen as an array."""
    parts = path.split(".")
    out, seen = [], False
    for record in corpus:
        found = [v for v in _instances(record, parts) if isinstance(v, list)]
        if found:
            seen = True
            out.extend(len(v) for v in found)
        elif absent_as_zero:
            out.append(0)
    return out, seen


def array_length_wasserstein(real, synth, path: str, absent_as_zero: bool = True) -> float:
    """W1 between the array-length distributions at ``path``.

    Records without the array count as length 0 unless ``absent_as_zero`` is
    False, in which case only present arrays are compared.
    """
    lr, seen_r = array_lengths(real, path, absent_as_zero)
    ls, seen_s = array_lengths(synth, path, absent_as_zero)
    if not (seen_r or seen_s):
        raise KeyError(f"no array at path {path!r}")
    if not lr or not ls:
        return float("nan")
    return wasserstein_1d(lr, ls)


def length_histogram(corpus, path: str, absent_as_zero: bool = True) -> dict[int, int]:
    lengths, _ = array_lengths(corpus, path, absent_as_zero)
    values, counts = np.unique(np.asarray(lengths, dtype=int), return_counts=True)
    return {int(v): int(c) for v, c in zip(values, counts)}
