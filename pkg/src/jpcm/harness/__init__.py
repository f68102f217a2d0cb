"""Scenario runner: configs, closed-loop simulation, RMSE, CSV logs and figures."""

from .metrics import Rmse, compute_rmse, emit_csv, read_csv
from .runner import RunLog, StepRecord, run_scenario
from .scenario import Disturbance, Scenario, canned, load_scenario

__all__ = [
    "Disturbance",
    "Rmse",
    "RunLog",
    "Scenario",
    "StepRecord",
    "canned",
    "compute_rmse",
    "emit_csv",
    "load_scenario",
    "read_csv",
    "run_scenario",
]
