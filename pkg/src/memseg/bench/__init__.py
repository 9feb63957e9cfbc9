"""Synthetic benchmark harness: taxonomy, schedules, metrics, runner, CLI."""

from .metrics import IouAccumulator, RunResult, SessionResult, iou, miou
from .runner import (
    ABLATION_AXES,
    SETTINGS,
    ConfigError,
    ExperimentConfig,
    ExperimentResult,
    ablation_csv,
    config_from_json,
    config_to_json,
    report_csv,
    run_ablation,
    run_experiment,
)
from .schedule import ScheduleError, SessionSchedule, build_schedule, validate_schedule
from .taxonomy import RenderError, Taxonomy, TaxonomyError, TaxonomySpec, generate_taxonomy, render_sample

__all__ = [
    "ABLATION_AXES",
    "SETTINGS",
    "ConfigError",
    "ExperimentConfig",
    "ExperimentResult",
    "IouAccumulator",
    "RunResult",
    "RenderError",
    "ScheduleError",
    "SessionResult",
    "SessionSchedule",
    "Taxonomy",
    "TaxonomyError",
    "TaxonomySpec",
    "ablation_csv",
    "build_schedule",
    "config_from_json",
    "config_to_json",
    "generate_taxonomy",
    "iou",
    "miou",
    "render_sample",
    "report_csv",
    "run_ablation",
    "run_experiment",
    "validate_schedule",
]
