"""Distance to closest record."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from sklearn.neighbors import NearestNeighbors

from .tables import TRAINING, ColumnLayout, flatten, type_separate

EXACT_TOL = 1e-12


def privacy_score(dcr_percent: float) -> float:
    """``1 - 2 * max(DCR/100 - 0.5, 0)``; only closeness to train is penalized."""
    return float(1.0 - 2.0 * max(dcr_percent / 100.0 - 0.5, 0.0))


def encode_features(frames: list[pd.DataFrame]) -> list[np.ndarray]:
    """One-hot categoricals and range-normalized numerics over the union of frames.

    Undefined numeric cells map to 0; undefined categoricals to an all-zero block.
    """
    union = pd.concat(frames, ignore_index=True)
    blocks = []
    for name in union.columns:
        col = union[name]
        if isinstance(col.dtype, pd.CategoricalDtype):
            codes = col.cat.codes.to_numpy()
            block = np.zeros((len(col), len(col.cat.categories)))
            ok = codes >= 0
            block[np.flatnonzero(ok), codes[ok]] = 1.0
        else:
            x = col.to_numpy(dtype=float)
            finite = x[~np.isnan(x)]
            lo, hi = (finite.min(), finite.max()) if len(finite) else (0.0, 0.0)
            block = ((x - lo) / (hi - lo) if hi > lo else np.zeros_like(x))[:, None]
            block = np.nan_to_num(block, nan=0.0)
        blocks.append(block)
    full = np.hstack(blocks) if blocks else np.zeros((len(union), 0))
    out, start = [], 0
    for f in frames:
        out.append(full[start : start + len(f)])
        start += len(f)
    return out


@dataclass
class PrivacyResult:
    dcr: float  # percent of synthetic rows strictly closer to train than test
    score: float
    exact_matches: int  # synthetic rows at distance zero from some train row
    exact_matches_test: int
    n: int


def privacy_dcr(synth, train_half, test_half) -> PrivacyResult:
    if not (len(synth) == len(train_half) == len(test_half)):
        raise ValueError(
            f"DCR needs equally sized sets, got synth={len(synth)} train={len(train_half)} test={len(test_half)}"
        )
    if len(synth) == 0:
        raise ValueError("DCR needs non-empty sets")
    flats = [flatten(c) for c in (synth, train_half, test_half)]
    layout = ColumnLayout.from_tables(*flats)
    S, Tr, Te = encode_features([type_separate(f, TRAINING, layout).frame() for f in flats])
    # brute force expands |a-b|^2 via dot products and leaves ~1e-8 residue on
    # exact copies, which would break ties; the tree sums coordinate differences
    nn = dict(n_neighbors=1, algorithm="kd_tree")
    d_train = NearestNeighbors(**nn).fit(Tr).kneighbors(S)[0][:, 0]
    d_test = NearestNeighbors(**nn).fit(Te).kneighbors(S)[0][:, 0]
    dcr = 100.0 * float(np.mean(d_train < d_test))
    return PrivacyResult(
        dcr=dcr,
        score=privacy_score(dcr),
        exact_matches=int(np.sum(d_train <= EXACT_TOL)),
        exact_matches_test=int(np.sum(d_test <= EXACT_TOL)),
        n=len(synth),
    )
