"""Experiment configuration, orchestration, reporting and the command line."""
from .config import ExperimentConfig, PoisonSpec, Seeds
from .pipeline import RunRecord, run_attack_pipeline, run_pipeline, run_rate_ablation, run_view_mode_analysis
from .report import ComparisonRow, render_report
