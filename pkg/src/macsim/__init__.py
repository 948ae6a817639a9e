"""Desk-scale simulator of model-agnostic decentralized collaborative
learning for next-POI recommendation."""

from .config import ExperimentConfig, load_config
from .experiment import MetricsReport, run_experiment

__all__ = ["ExperimentConfig", "load_config", "MetricsReport", "run_experiment"]
