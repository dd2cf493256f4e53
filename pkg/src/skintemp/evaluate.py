"""Absolute-error reports: per-frame errors, histogram bins, summary stats.

Bins are the half-open intervals [0, 0.25), [0.25, 0.5), [0.5, 0.75),
[0.75, 1.0), [1.0, inf) in degC. Median and quartiles use midpoint
interpolation: for the p-quantile of n sorted values, h = (n - 1) * p;
the result is x[h] when h is an integer, otherwise the average of the two
neighbouring order statistics.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InsufficientDataError, OutOfRangeError, ShapeMismatchError

BIN_EDGES_C = (0.0, 0.25, 0.5, 0.75, 1.0)
BIN_LABELS = ("[0,0.25)", "[0.25,0.5)", "[0.5,0.75)", "[0.75,1.0)", "[1.0,inf)")


@dataclass
class ErrorReport:
    model_id: str
    n: int
    mean_c: float
    median_c: float
    q1_c: float
    q3_c: float
    bins: tuple[float, float, float, float, float]
    per_frame_errors: list[float]

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "n": self.n,
            "mean_c": self.mean_c,
            "median_c": self.median_c,
            "q1_c": self.q1_c,
            "q3_c": self.q3_c,
            "bins": dict(zip(BIN_LABELS, self.bins)),
            "per_frame_errors": self.per_frame_errors,
        }

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load_json(cls, path: str | Path) -> "ErrorReport":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"report not found: {path}")
        doc = json.loads(path.read_text())
        return cls(
            model_id=doc["model_id"],
            n=doc["n"],
            mean_c=doc["mean_c"],
            median_c=doc["median_c"],
            q1_c=doc["q1_c"],
            q3_c=doc["q3_c"],
            bins=tuple(doc["bins"][label] for label in BIN_LABELS),
            per_frame_errors=[float(v) for v in doc["per_frame_errors"]],
        )


def absolute_errors(pred, truth) -> np.ndarray:
    """Element-wise |prediction - truth| in degC."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeMismatchError(
            f"prediction/truth length mismatch: {pred.shape} vs {truth.shape}"
        )
    if pred.size == 0:
        raise InsufficientDataError("absolute_errors needs at least one element")
    return np.abs(pred - truth)


def bin_errors(errors) -> np.ndarray:
    """Fractions of errors per half-open bin; fractions sum to 1."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise InsufficientDataError("bin_errors needs at least one error")
    if errors.min() < 0:
        raise OutOfRangeError(f"negative error value {errors.min()}")
    edges = list(BIN_EDGES_C) + [np.inf]
    counts = np.array(
        [np.count_nonzero((errors >= lo) & (errors < hi)) for lo, hi in zip(edges[:-1], edges[1:])],
        dtype=np.float64,
    )
    return counts / errors.size


def _midpoint_quantile(sorted_vals: np.ndarray, p: float) -> float:
    h = (sorted_vals.size - 1) * p
    lo = int(np.floor(h))
    hi = int(np.ceil(h))
    if lo == hi:
        return float(sorted_vals[lo])
    return float(0.5 * (sorted_vals[lo] + sorted_vals[hi]))


def summarize(errors) -> tuple[float, float, tuple[float, float]]:
    """(mean, median, (q1, q3)) with midpoint-interpolated order statistics."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise InsufficientDataError("summarize needs at least one error")
    ordered = np.sort(errors)
    return (
        float(errors.mean()),
        _midpoint_quantile(ordered, 0.5),
        (_midpoint_quantile(ordered, 0.25), _midpoint_quantile(ordered, 0.75)),
    )


def build_report(pred, truth, model_id: str) -> ErrorReport:
    errors = absolute_errors(pred, truth)
    mean, median, (q1, q3) = summarize(errors)
    return ErrorReport(
        model_id=model_id,
        n=int(errors.size),
        mean_c=mean,
        median_c=median,
        q1_c=q1,
        q3_c=q3,
        bins=tuple(float(b) for b in bin_errors(errors)),
        per_frame_errors=[float(e) for e in errors],
    )


def write_per_frame_csv(path: str | Path, frame_ids, pred, truth) -> None:
    """Companion CSV: one row per frame with prediction, truth, abs error."""
    errors = absolute_errors(pred, truth)
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_id", "t_pred", "t_true", "abs_error"])
        for fid, p, t, e in zip(frame_ids, pred, truth, errors):
            writer.writerow([fid, repr(float(p)), repr(float(t)), repr(float(e))])
