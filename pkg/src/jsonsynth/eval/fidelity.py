"""Column shapes and column pair trends on type-separated tables."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .tables import VALUE_KINDS, TypedTable

N_BINS = 10
MIN_PEARSON_ROWS = 3


def tv_complement(a, b) -> float:
    """``1 - TV`` between the empirical distributions of two label samples."""
    a = pd.Series(np.asarray(a, dtype=object)).value_counts(normalize=True)
    b = pd.Series(np.asarray(b, dtype=object)).value_counts(normalize=True)
    p, q = a.align(b, fill_value=0.0)
    return float(1.0 - 0.5 * np.abs(p.to_numpy() - q.to_numpy()).sum())


def ks_complement(x, y) -> float:
    return float(1.0 - stats.ks_2samp(np.asarray(x, float), np.asarray(y, float)).statistic)


@dataclass
class ColumnShape:
    column: str
    presence_real: float
    presence_synth: float
    phi_pres: float
    phi_type: float
    phi_val: float
    flags: list = field(default_factory=list)

    @property
    def phi(self) -> float:
        return self.phi_pres * self.phi_type * self.phi_val

    def to_dict(self) -> dict:
        return {
            "column": self.column,
            "presence_real": self.presence_real,
            "presence_synth": self.presence_synth,
            "phi_pres": self.phi_pres,
            "phi_type": self.phi_type,
            "phi_val": self.phi_val,
            "phi": self.phi,
            "flags": ";".join(self.flags),
        }


@dataclass
class ShapesResult:
    score: float
    columns: list


def _value_similarity(r, s, kind: str, flags: list) -> float:
    if kind == "num":
        x, y = r.num[r.defined("num")], s.num[s.defined("num")]
        if len(x) < 2 or len(y) < 2:
            flags.append("num:tiny-support")
            return 1.0
        return ks_complement(x, y)
    return tv_complement(r.values(kind)[r.defined(kind)], s.values(kind)[s.defined(kind)])


def column_shape(r, s) -> ColumnShape:
    """Chain-rule similarity over presence, type given presence, value given type."""
    flags: list = []
    pr, ps = r.present, s.present
    pres_r, pres_s = float(pr.mean()), float(ps.mean())
    phi_pres = 1.0 - abs(pres_r - pres_s)
    if pr.any() and ps.any():
        phi_type = tv_complement(r.dtype[pr], s.dtype[ps])
        tr = pd.Series(r.dtype[pr]).value_counts(normalize=True)
        ts = pd.Series(s.dtype[ps]).value_counts(normalize=True)
        num, den = 0.0, 0.0
        for kind in VALUE_KINDS:
            if kind in tr.index and kind in ts.index:
                w = 0.5 * (tr[kind] + ts[kind])
                num += w * _value_similarity(r, s, kind, flags)
                den += w
        phi_val = num / den if den > 0 else 1.0
    else:
        flags.append("absent-on-one-side" if (pr.any() or ps.any()) else "never-present")
        phi_type = phi_val = 1.0
    return ColumnShape(r.name, pres_r, pres_s, phi_pres, phi_type, phi_val, flags)


def column_shapes(real: TypedTable, synth: TypedTable) -> ShapesResult:
    if len(real) == 0 or len(synth) == 0:
        raise ValueError("column shapes need non-empty tables")
    cols = [column_shape(real.sources[n], synth.sources[n]) for n in real.sources]
    if not cols:
        raise ValueError("no columns to compare")
    return ShapesResult(float(np.mean([c.phi for c in cols])), cols)


@dataclass
class TrendColumn:
    name: str
    continuous: bool
    real: np.ndarray  # float (continuous) or object labels; undefined = NaN / None
    synth: np.ndarray


def trend_columns(real: TypedTable, synth: TypedTable) -> list[TrendColumn]:
    """Value sub-columns of every source, plus ``.dtype`` where it varies."""
    out = []
    for name, r in real.sources.items():
        s = synth.sources[name]
        if r.is_alen:
            out.append(TrendColumn(name, True, r.num, s.num))
            continue
        if len(real.layout.kinds.get(name, ())) > 1:
            out.append(TrendColumn(f"{name}.dtype", False, r.dtype, s.dtype))
        for kind in real.layout.value_kinds(name):
            label = name if real.layout.is_plain(name) else f"{name}.{kind}"
            out.append(TrendColumn(label, kind == "num", r.values(kind), s.values(kind)))
    return out


def _codes(col: TrendColumn) -> tuple[np.ndarray, np.ndarray]:
    """Integer codes over the union of both sides; -1 marks undefined cells."""
    if col.continuous:
        both = np.concatenate([col.real, col.synth])
        finite = both[~np.isnan(both)]
        if len(finite) == 0:
            return np.full(len(col.real), -1), np.full(len(col.synth), -1)
        lo, hi = finite.min(), finite.max()

        def binned(x):
            out = np.full(len(x), -1)
            ok = ~np.isnan(x)
            if hi > lo:
                out[ok] = np.clip(((x[ok] - lo) / (hi - lo) * N_BINS).astype(int), 0, N_BINS - 1)
            else:
                out[ok] = 0
            return out

        return binned(col.real), binned(col.synth)
    labels = pd.Series(np.concatenate([col.real, col.synth]), dtype=object)
    codes, _ = pd.factorize(labels, use_na_sentinel=True)
    return codes[: len(col.real)], codes[len(col.real) :]


def _joint_tv(ar, br, as_, bs) -> float:
    """2-D TV complement of two pairs of non-negative code arrays."""
    nb = int(max(br.max(), bs.max())) + 1
    kr = ar.astype(np.int64) * nb + br
    ks = as_.astype(np.int64) * nb + bs
    keys, inverse = np.unique(np.concatenate([kr, ks]), return_inverse=True)
    p = np.bincount(inverse[: len(kr)], minlength=len(keys)) / len(kr)
    q = np.bincount(inverse[len(kr) :], minlength=len(keys)) / len(ks)
    return float(1.0 - 0.5 * np.abs(p - q).sum())


def _pearson(x, y) -> float | None:
    if len(x) < MIN_PEARSON_ROWS or np.std(x) == 0 or np.std(y) == 0:
        return None
    return float(np.corrcoef(x, y)[0, 1])


@dataclass
class PairTrend:
    a: str
    b: str
    weight: float
    score: float
    metric: str


@dataclass
class TrendsResult:
    score: float
    pairs: list

    @property
    def n_pairs(self) -> int:
        return sum(p.weight > 0 for p in self.pairs)


def pair_trends(real: TypedTable, synth: TypedTable) -> TrendsResult:
    cols = trend_columns(real, synth)
    if len(cols) < 2:
        raise ValueError("pair trends need at least two columns")
    codes = [_codes(c) for c in cols]
    defined = [
        ((~np.isnan(c.real)) if c.continuous else (code[0] >= 0), (~np.isnan(c.synth)) if c.continuous else (code[1] >= 0))
        for c, code in zip(cols, codes)
    ]
    pairs = []
    for i in range(len(cols)):
        for j in range(i + 1, len(cols)):
            a, b = cols[i], cols[j]
            co_r = defined[i][0] & defined[j][0]
            co_s = defined[i][1] & defined[j][1]
            w = max(float(co_r.mean()), float(co_s.mean()))
            if w == 0:
                continue
            if not co_r.any() or not co_s.any():
                # the pair only ever co-occurs on one side
                pairs.append(PairTrend(a.name, b.name, w, 0.0, "one-sided"))
                continue
            if a.continuous and b.continuous:
                rr = _pearson(a.real[co_r], b.real[co_r])
                rs = _pearson(a.synth[co_s], b.synth[co_s])
                if rr is None or rs is None:
                    pairs.append(PairTrend(a.name, b.name, 0.0, float("nan"), "pearson-undefined"))
                    continue
                pairs.append(PairTrend(a.name, b.name, w, 1.0 - abs(rr - rs) / 2.0, "correlation"))
            else:
                sim = _joint_tv(codes[i][0][co_r], codes[j][0][co_r], codes[i][1][co_s], codes[j][1][co_s])
                metric = "contingency" if not (a.continuous or b.continuous) else "contingency-binned"
                pairs.append(PairTrend(a.name, b.name, w, sim, metric))
    total = sum(p.weight for p in pairs)
    if total == 0:
        return TrendsResult(1.0, pairs)
    score = sum(p.weight * p.score for p in pairs if p.weight > 0) / total
    return TrendsResult(float(score), pairs)
