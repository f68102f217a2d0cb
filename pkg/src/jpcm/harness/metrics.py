"""Tracking-error statistics and the per-step CSV format."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..so3 import _log
from .runner import RunLog

COLUMNS = (
    ["t"]
    + [f"p_true_{a}" for a in "xyz"]
    + [f"p_ref_{a}" for a in "xyz"]
    + [f"rotvec_{a}" for a in "xyz"]
    + [f"u{j}" for j in range(4)]
    + [f"err_p_{a}" for a in "xyz"]
    + [f"err_R_{a}" for a in "xyz"]
    + ["iters", "solve_ms"]
)
ERR_P = tuple(f"err_p_{a}" for a in "xyz")
ERR_R = tuple(f"err_R_{a}" for a in "xyz")
FAILURE_PREFIX = "# truncated: "


@dataclass(frozen=True)
class Rmse:
    position: np.ndarray  # m, per axis
    rotation: np.ndarray  # rad, per rotation-vector component
    samples: int


def rmse_from_errors(t, err_p, err_R, skip: float = 1.0) -> Rmse:
    """Per-axis RMSE over samples with ``t >= skip``."""
    t = np.asarray(t, dtype=float)
    if t.size == 0:
        raise ValueError("empty log")
    keep = t >= skip - 1e-9
    if not keep.any():
        raise ValueError(f"no samples after the {skip} s transient window")
    ep = np.asarray(err_p, dtype=float)[keep]
    eR = np.asarray(err_R, dtype=float)[keep]
    return Rmse(np.sqrt(np.mean(ep * ep, axis=0)), np.sqrt(np.mean(eR * eR, axis=0)), int(keep.sum()))


def compute_rmse(log: RunLog, skip: float | None = None) -> Rmse:
    if not log.records:
        raise ValueError("empty log")
    skip = log.scenario.rmse_skip if skip is None else skip
    t = [r.t for r in log.records]
    return rmse_from_errors(t, [r.pos_error for r in log.records],
                            [r.rot_error for r in log.records], skip)


def _row(r, timing: bool) -> list:
    vals = [r.t, *r.truth.p, *r.ref.p, *_log(r.truth.R), *r.rotors.speeds,
            *r.pos_error, *r.rot_error]
    ms = r.solve_ms if timing else math.nan
    return [f"{v:.17g}" for v in vals] + [str(int(r.iterations)), f"{ms:.17g}"]


def emit_csv(log: RunLog, path, timing: bool = False) -> Path:
    """Write one row per step with 17 significant digits.

    Wall-clock solve times are written as ``nan`` unless ``timing`` is set,
    which keeps the file bit-identical across runs with the same seed. A
    truncated run ends with a ``# truncated: <reason>`` line.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in log.records:
            w.writerow(_row(r, timing))
        if log.failure:
            fh.write(FAILURE_PREFIX + log.failure.replace("\n", " ") + "\n")
    return path


@dataclass
class CsvLog:
    """A CSV log read back as arrays, one row per step."""

    data: dict
    failure: str = ""

    def __len__(self) -> int:
        return len(self.data["t"])

    def cols(self, *names) -> np.ndarray:
        return np.column_stack([self.data[n] for n in names])

    def rmse(self, skip: float = 1.0) -> Rmse:
        return rmse_from_errors(self.data["t"], self.cols(*ERR_P), self.cols(*ERR_R), skip)


def read_csv(path) -> CsvLog:
    path = Path(path)
    failure = ""
    with path.open(newline="") as fh:
        lines = fh.read().splitlines()
    if lines and lines[-1].startswith(FAILURE_PREFIX):
        failure = lines.pop()[len(FAILURE_PREFIX):]
    rows = list(csv.reader(lines))
    if not rows or tuple(rows[0]) != tuple(COLUMNS):
        raise ValueError(f"{path}: not a run log (unexpected header)")
    body = np.array([[float(v) for v in row] for row in rows[1:]], dtype=float).reshape(-1, len(COLUMNS))
    return CsvLog({name: body[:, n] for n, name in enumerate(COLUMNS)}, failure)
