"""Assemble metric families into one report and average replicates."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .arrays import array_length_wasserstein
from .classifiers import DETECTION_PARAMS, UTILITY_PARAMS, classifier_settings, detection_c2st, utility_tstr
from .fidelity import column_shapes, pair_trends
from .privacy import privacy_dcr
from .tables import EVALUATION, separate


@dataclass
class MetricReport:
    fidelity: dict | None = None
    utility: dict | None = None
    detection: dict | None = None
    privacy: dict | None = None
    arrays: dict | None = None
    columns: list = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    def to_dict(self, include_columns: bool = True) -> dict:
        d = {
            "fidelity": self.fidelity,
            "utility": self.utility,
            "detection": self.detection,
            "privacy": self.privacy,
            "arrays": self.arrays,
            "settings": self.settings,
        }
        if include_columns:
            d["columns"] = self.columns
        return d

    def primary_scores(self) -> dict:
        out = {}
        if self.fidelity:
            out.update({f"fidelity.{k}": self.fidelity[k] for k in ("overall", "shapes", "trends")})
        if self.utility:
            out["utility.score"] = self.utility["score"]
        if self.detection:
            out["detection.score"] = self.detection["score"]
        if self.privacy:
            out["privacy.score"] = self.privacy["score"]
        return out


def fidelity(real, synth) -> tuple[dict, list]:
    r, s = separate(real, synth, mode=EVALUATION)
    shapes = column_shapes(r, s)
    trends = pair_trends(r, s)
    summary = {
        "overall": 0.5 * (shapes.score + trends.score),
        "shapes": shapes.score,
        "trends": trends.score,
        "n_columns": len(shapes.columns),
        "n_pairs": trends.n_pairs,
    }
    return summary, [c.to_dict() for c in shapes.columns]


def evaluate(
    real,
    synth,
    test=None,
    target: str | None = None,
    seed: int = 0,
    privacy_sets: tuple | None = None,
    array_paths=(),
    metrics=("fidelity", "utility", "detection"),
) -> MetricReport:
    """Compare ``synth`` against the real training corpus ``real``.

    Utility needs ``test`` and ``target``; privacy needs ``privacy_sets =
    (synth, train_half, test_half)`` of equal sizes.
    """
    report = MetricReport(settings={"seed": seed, "target": target})
    if "fidelity" in metrics:
        report.fidelity, report.columns = fidelity(real, synth)
    if "utility" in metrics and test is not None and target is not None:
        u = utility_tstr(synth, real, test, target, seed)
        report.utility = {"score": u.score, "tstr_f1": u.tstr_f1, "trtr_f1": u.trtr_f1}
        report.settings["utility_classifier"] = classifier_settings(UTILITY_PARAMS)
    if "detection" in metrics:
        d = detection_c2st(real, synth, seed)
        report.detection = {"score": d.score, "auc": d.auc, "fold_aucs": d.fold_aucs, "n_per_class": d.n_per_class}
        report.settings["detection_classifier"] = classifier_settings(DETECTION_PARAMS)
    if privacy_sets is not None:
        p = privacy_dcr(*privacy_sets)
        report.privacy = {
            "score": p.score,
            "dcr": p.dcr,
            "exact_matches": p.exact_matches,
            "exact_matches_test": p.exact_matches_test,
            "n": p.n,
        }
    if array_paths:
        report.arrays = {
            path: {
                "wasserstein": array_length_wasserstein(real, synth, path, absent_as_zero=True),
                "wasserstein_present_only": array_length_wasserstein(real, synth, path, absent_as_zero=False),
            }
            for path in array_paths
        }
    return report


def _numeric_leaves(d, prefix=""):
    if isinstance(d, dict):
        for k, v in d.items():
            yield from _numeric_leaves(v, f"{prefix}.{k}" if prefix else k)
    elif isinstance(d, (int, float)) and not isinstance(d, bool):
        yield prefix, float(d)


def average_reports(reports: list[MetricReport]) -> dict:
    """Mean and population std of every numeric entry across replicates."""
    if not reports:
        raise ValueError("no reports to average")
    values: dict[str, list] = {}
    for rep in reports:
        d = rep.to_dict(include_columns=False)
        d.pop("settings", None)
        for key, v in _numeric_leaves(d):
            values.setdefault(key, []).append(v)
    out = {}
    for key, vs in values.items():
        arr = np.asarray(vs, dtype=float)
        finite = arr[~np.isnan(arr)]
        out[key] = {
            "mean": float(finite.mean()) if len(finite) else math.nan,
            "std": float(finite.std()) if len(finite) else math.nan,
            "n": int(len(finite)),
        }
    return out


COLUMN_FIELDS = ["column", "presence_real", "presence_synth", "phi_pres", "phi_type", "phi_val", "phi", "flags"]


def write_columns_csv(columns: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=COLUMN_FIELDS)
        w.writeheader()
        for row in columns:
            w.writerow({k: (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k]) for k in COLUMN_FIELDS})
