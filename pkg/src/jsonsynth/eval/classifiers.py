"""Classifier-based metrics: TSTR utility and C2ST detection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from sklearn.metrics import f1_score, roc_auc_score
from sklearn.model_selection import StratifiedKFold
from xgboost import XGBClassifier

from .tables import TRAINING, ColumnLayout, flatten, type_separate

UTILITY_PARAMS = {"n_estimators": 100, "max_depth": 6}
DETECTION_PARAMS = {"n_estimators": 10, "max_depth": 3}
DETECTION_FOLDS = 3


def _classifier(params: dict, seed: int) -> XGBClassifier:
    return XGBClassifier(
        **params,
        enable_categorical=True,
        tree_method="hist",
        n_jobs=1,
        random_state=seed,
    )


def classifier_settings(params: dict) -> dict:
    """Hyper-parameters actually in effect (library defaults filled in)."""
    clf = _classifier(params, 0)
    keep = ("n_estimators", "max_depth", "learning_rate", "subsample", "colsample_bytree", "min_child_weight", "reg_lambda")
    settings = {k: clf.get_params().get(k) for k in keep}
    settings["library"] = "xgboost"
    settings["tree_method"] = "hist"
    return settings


def _target_labels(flat, target: str) -> np.ndarray:
    out = np.full(len(flat), None, dtype=object)
    for i, row in enumerate(flat.rows):
        if target in row and row[target] is not None:
            v = row[target]
            if isinstance(v, (dict, list)) or (not isinstance(v, (str, bool))):
                raise ValueError(f"target {target!r} must be categorical, got {v!r}")
            out[i] = str(v)
    return out


@dataclass
class UtilityResult:
    score: float
    tstr_f1: float
    trtr_f1: float


def _fit_predict(X_train, y_train, X_test, seed: int) -> np.ndarray:
    classes = np.unique(y_train)
    if len(classes) == 1:
        return np.full(len(X_test), classes[0], dtype=object)
    codes = np.searchsorted(classes, y_train)
    clf = _classifier(UTILITY_PARAMS, seed)
    clf.fit(X_train, codes)
    return classes[clf.predict(X_test).astype(int)]


def utility_tstr(synth_train, real_train, real_test, target: str, seed: int = 0) -> UtilityResult:
    """``min(F1_TSTR / F1_TRTR, 1)`` with weighted F1 on ``real_test``.

    ``target`` is a flattened dot-path column holding categorical values.
    Rows where the target is absent or null are dropped.
    """
    flats = [flatten(c) for c in (synth_train, real_train, real_test)]
    layout = ColumnLayout.from_tables(*flats)
    if target not in layout.columns:
        raise KeyError(f"target column {target!r} not found")
    frames, labels = [], []
    for f in flats:
        y = _target_labels(f, target)
        X = type_separate(f, TRAINING, layout).frame(exclude=[target])
        keep = np.array([v is not None for v in y], dtype=bool)
        frames.append(X[keep].reset_index(drop=True))
        labels.append(y[keep])
    (Xs, ys), (Xr, yr), (Xt, yt) = zip(frames, labels)
    if len(ys) == 0 or len(yr) == 0 or len(yt) == 0:
        raise ValueError("utility needs non-empty synthetic, real and test tables")
    if len(np.unique(yr)) < 2:
        raise ValueError(f"target {target!r} has a single class in the real training data")
    trtr = f1_score(yt, _fit_predict(Xr, yr, Xt, seed), average="weighted", zero_division=0)
    tstr = f1_score(yt, _fit_predict(Xs, ys, Xt, seed), average="weighted", zero_division=0)
    score = min(tstr / trtr, 1.0) if trtr > 0 else 0.0
    return UtilityResult(float(score), float(tstr), float(trtr))


def detection_score(aucs) -> float:
    """``1 - mean(max(0.5, AUC_j) * 2 - 1)``."""
    aucs = np.asarray(aucs, dtype=float)
    return float(1.0 - np.mean(np.maximum(0.5, aucs) * 2.0 - 1.0))


@dataclass
class DetectionResult:
    score: float
    auc: float
    fold_aucs: list
    n_per_class: int


def detection_c2st(real, synth, seed: int = 0) -> DetectionResult:
    """Classifier two-sample test on equally sized real and synthetic tables."""
    flats = [flatten(real), flatten(synth)]
    if len(flats[0]) == 0 or len(flats[1]) == 0:
        raise ValueError("detection needs non-empty tables")
    layout = ColumnLayout.from_tables(*flats)
    Xr, Xs = (type_separate(f, TRAINING, layout).frame() for f in flats)
    rng = np.random.default_rng(seed)
    n = min(len(Xr), len(Xs))
    if n < DETECTION_FOLDS:
        raise ValueError(f"detection needs at least {DETECTION_FOLDS} rows per side")
    if len(Xr) > n:
        Xr = Xr.iloc[np.sort(rng.choice(len(Xr), n, replace=False))]
    if len(Xs) > n:
        Xs = Xs.iloc[np.sort(rng.choice(len(Xs), n, replace=False))]
    X = pd.concat([Xr, Xs], ignore_index=True)
    y = np.concatenate([np.zeros(n, dtype=int), np.ones(n, dtype=int)])
    folds = StratifiedKFold(n_splits=DETECTION_FOLDS, shuffle=True, random_state=seed)
    aucs = []
    for train_idx, test_idx in folds.split(X, y):
        clf = _classifier(DETECTION_PARAMS, seed)
        clf.fit(X.iloc[train_idx], y[train_idx])
        p = clf.predict_proba(X.iloc[test_idx])[:, 1]
        aucs.append(float(roc_auc_score(y[test_idx], p)))
    return DetectionResult(detection_score(aucs), float(np.mean(aucs)), aucs, n)
