"""Experiment orchestration: configs, protocols, reports and the command line."""
from .config import ExperimentConfig, load_config
from .protocols import run_protocol
from .report import MetricsReport, verify_report
from .artifacts import emit_artifacts

__all__ = ["ExperimentConfig", "load_config", "run_protocol", "MetricsReport", "verify_report",
           "emit_artifacts"]
