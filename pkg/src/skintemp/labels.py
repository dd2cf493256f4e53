"""Dense per-frame temperature labels from sparse contact-sensor samples.

Sparse samples (one per minute in the recording protocol) are linearly
interpolated onto a 5-second grid; frames then take the label of the
5-second window containing them (piecewise constant within each window).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InsufficientDataError, OutOfRangeError

WINDOW_S = 5.0
TEMP_PLAUSIBLE_C = (20.0, 45.0)


@dataclass(frozen=True)
class TemperatureTrace:
    """Sparse ground-truth samples (time_s, temp_c), strictly increasing in time."""

    times_s: np.ndarray
    temps_c: np.ndarray
    source_uncertainty_c: float = 0.125

    def __post_init__(self):
        t = np.asarray(self.times_s, dtype=np.float64)
        v = np.asarray(self.temps_c, dtype=np.float64)
        if t.shape != v.shape or t.ndim != 1:
            raise InsufficientDataError("trace times and temperatures must be equal-length 1-D")
        if t.size >= 2 and not np.all(np.diff(t) > 0):
            raise OutOfRangeError("trace times must be strictly increasing")
        lo, hi = TEMP_PLAUSIBLE_C
        if v.size and (v.min() < lo or v.max() > hi):
            raise OutOfRangeError(
                f"trace temperatures outside plausibility band [{lo}, {hi}] degC"
            )
        object.__setattr__(self, "times_s", t)
        object.__setattr__(self, "temps_c", v)

    def save_csv(self, path: str | Path) -> None:
        _write_time_temp_csv(path, self.times_s, self.temps_c)

    @classmethod
    def load_csv(cls, path: str | Path, source_uncertainty_c: float = 0.125) -> "TemperatureTrace":
        times, temps = _read_time_temp_csv(path)
        return cls(times, temps, source_uncertainty_c)


@dataclass(frozen=True)
class DenseLabels:
    """Interpolated labels on the 5 s grid spanning [first, last] sample time."""

    grid_times_s: np.ndarray
    grid_temps_c: np.ndarray
    window_s: float = WINDOW_S

    @property
    def span(self) -> tuple[float, float]:
        return float(self.grid_times_s[0]), float(self.grid_times_s[-1])

    def save_csv(self, path: str | Path) -> None:
        _write_time_temp_csv(path, self.grid_times_s, self.grid_temps_c)

    @classmethod
    def load_csv(cls, path: str | Path) -> "DenseLabels":
        times, temps = _read_time_temp_csv(path)
        return cls(times, temps)


def interpolate(trace: TemperatureTrace) -> DenseLabels:
    """Linear interpolation of the trace onto the 5 s grid.

    The grid starts at the first sample time and never extends beyond the
    last one (no extrapolation). Grid points coinciding with sample times
    reproduce those samples exactly.
    """
    if trace.times_s.size < 2:
        raise InsufficientDataError(
            f"interpolation needs at least 2 samples, got {trace.times_s.size}"
        )
    t0 = float(trace.times_s[0])
    t1 = float(trace.times_s[-1])
    n_steps = int(np.floor((t1 - t0) / WINDOW_S + 1e-9))
    grid = t0 + WINDOW_S * np.arange(n_steps + 1)
    values = np.interp(grid, trace.times_s, trace.temps_c)
    # exactness at original sample times that land on the grid
    on_grid = np.isclose((trace.times_s - t0) % WINDOW_S, 0.0) | np.isclose(
        (trace.times_s - t0) % WINDOW_S, WINDOW_S
    )
    for st, sv in zip(trace.times_s[on_grid], trace.temps_c[on_grid]):
        idx = int(round((st - t0) / WINDOW_S))
        if 0 <= idx <= n_steps:
            values[idx] = sv
    return DenseLabels(grid_times_s=grid, grid_temps_c=values)


def label_frame(labels: DenseLabels, t: float) -> float:
    """Label for a frame at time t: the grid value of its 5 s window.

    The window for t is [5k, 5k + 5) relative to the grid origin, so the
    label is constant within each window.
    """
    start, end = labels.span
    if t < start or t > end:
        raise OutOfRangeError(
            f"frame time {t} s outside labeled span [{start}, {end}] s"
        )
    idx = int(np.floor((t - start) / labels.window_s + 1e-9))
    idx = min(idx, labels.grid_times_s.size - 1)
    return float(labels.grid_temps_c[idx])


def _write_time_temp_csv(path: str | Path, times: np.ndarray, temps: np.ndarray) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s", "temp_c"])
        for t, v in zip(times, temps):
            writer.writerow([repr(float(t)), repr(float(v))])


def _read_time_temp_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"temperature csv not found: {path}")
    times, temps = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            times.append(float(row["time_s"]))
            temps.append(float(row["temp_c"]))
    return np.asarray(times), np.asarray(temps)
