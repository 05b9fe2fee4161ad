"""Experiment configuration, pipelines and report emission."""

from .analysis import DegenerateVarianceWarning, Projection, cluster_separation, pca_project, power_eig
from .bench import bench_scaling, linear_fit
from .config import ConfigError, EvalConfig, ExperimentConfig, substream
from .presets import PRESETS, preset
from .report import Report, emit_plot_data, load_plot_files, load_report, parse_table, table_text, write_report
from .runner import StageError, run_experiment

__all__ = [
    "ConfigError", "DegenerateVarianceWarning", "EvalConfig", "ExperimentConfig", "PRESETS", "Projection",
    "Report", "StageError", "bench_scaling", "cluster_separation", "emit_plot_data", "linear_fit",
    "load_plot_files", "load_report", "parse_table", "pca_project", "power_eig", "preset", "run_experiment", "substream",
    "table_text", "write_report",
]
