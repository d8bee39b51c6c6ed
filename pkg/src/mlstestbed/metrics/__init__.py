"""Event log grammar, metric extraction, regression and report files."""

from .analysis import (
    METRICS,
    BadArity,
    LatencySample,
    OrphanProcess,
    UnknownMetric,
    UpdateCostSample,
    aggregate,
    aggregate_runs,
    auc,
    compute_latency,
    metric_values,
    octave,
    pair_commits,
    restrict,
    update_cost_samples,
)
from .export import (
    IoError,
    export_csv,
    export_labeled_csv,
    export_latency_samples,
    export_plotdata,
    read_csv,
    read_plotdata,
)
from .log import ACTIONS, BadLine, LogRecord, LogSink, parse_line, parse_lines, read_log
from .regression import DegenerateSeries, RegressionFit, fit, fit_both

__all__ = [
    "ACTIONS", "BadArity", "BadLine", "DegenerateSeries", "IoError", "LatencySample", "LogRecord",
    "LogSink", "METRICS", "OrphanProcess", "RegressionFit", "UnknownMetric", "UpdateCostSample",
    "aggregate", "aggregate_runs", "auc", "compute_latency", "export_csv", "export_labeled_csv",
    "export_latency_samples", "export_plotdata", "fit", "fit_both", "metric_values", "octave",
    "pair_commits", "parse_line", "parse_lines", "read_csv", "read_log", "read_plotdata",
    "restrict", "update_cost_samples",
]
