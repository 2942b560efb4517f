"""Config-driven runs, sweeps, landscapes and reports."""

from .config import RunConfig, check, validate, with_master_seed
from .landscape import LandscapeGrid, landscape, run_landscape
from .report import report
from .runs import evaluate_run, load_run, train_run
from .sweeps import sweep_alpha, sweep_label_noise, sweep_refset

__all__ = [
    "LandscapeGrid",
    "RunConfig",
    "check",
    "evaluate_run",
    "landscape",
    "load_run",
    "report",
    "run_landscape",
    "sweep_alpha",
    "sweep_label_noise",
    "sweep_refset",
    "train_run",
    "validate",
    "with_master_seed",
]
