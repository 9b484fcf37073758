"""Evaluation of synthetic JSON corpora against real ones."""

from .arrays import array_length_wasserstein, array_lengths, length_histogram, wasserstein_1d
from .classifiers import DetectionResult, UtilityResult, detection_c2st, detection_score, utility_tstr
from .fidelity import ColumnShape, ShapesResult, TrendsResult, column_shapes, ks_complement, pair_trends, tv_complement
from .privacy import PrivacyResult, encode_features, privacy_dcr, privacy_score
from .report import MetricReport, average_reports, evaluate, fidelity, write_columns_csv
from .tables import (
    DTYPES,
    EVALUATION,
    TRAINING,
    ColumnLayout,
    FlatTable,
    SourceColumn,
    TypedTable,
    dtype_of,
    flatten,
    separate,
    type_separate,
)

__all__ = [
    "DTYPES",
    "EVALUATION",
    "TRAINING",
    "ColumnLayout",
    "ColumnShape",
    "DetectionResult",
    "FlatTable",
    "MetricReport",
    "PrivacyResult",
    "ShapesResult",
    "SourceColumn",
    "TrendsResult",
    "TypedTable",
    "UtilityResult",
    "array_length_wasserstein",
    "array_lengths",
    "average_reports",
    "column_shapes",
    "detection_c2st",
    "detection_score",
    "dtype_of",
    "encode_features",
    "evaluate",
    "fidelity",
    "flatten",
    "ks_complement",
    "length_histogram",
    "pair_trends",
    "privacy_dcr",
    "privacy_score",
    "separate",
    "tv_complement",
    "type_separate",
    "utility_tstr",
    "wasserstein_1d",
    "write_columns_csv",
]
