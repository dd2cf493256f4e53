"""Per-subject skin sensitivity calibration.

Fits the linear saturation-temperature model T = k * S + b by ordinary
least squares; the slope k is the skin sensitivity index used by the
fusion models and by the linear baseline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import DegenerateDataError, InsufficientDataError


@dataclass(frozen=True)
class SsiRecord:
    subject_id: str
    k: float  # degC per unit saturation (the sensitivity index)
    b: float  # degC
    residual_rmse: float
    n_points: int


def fit_ssi(pairs: list[tuple[float, float]], subject_id: str = "") -> SsiRecord:
    """Least-squares line through (saturation, temperature) pairs.

    Raises InsufficientDataError for fewer than 2 pairs and
    DegenerateDataError when all saturations are identical.
    """
    if len(pairs) < 2:
        raise InsufficientDataError(f"ssi fit needs at least 2 pairs, got {len(pairs)}")
    s = np.asarray([p[0] for p in pairs], dtype=np.float64)
    t = np.asarray([p[1] for p in pairs], dtype=np.float64)
    s_mean = s.mean()
    t_mean = t.mean()
    s_var = float(np.sum((s - s_mean) ** 2))
    if s_var == 0.0:
        raise DegenerateDataError("all saturations identical; slope is undefined")
    k = float(np.sum((s - s_mean) * (t - t_mean)) / s_var)
    b = float(t_mean - k * s_mean)
    residuals = t - (k * s + b)
    rmse = float(np.sqrt(np.mean(residuals**2)))
    return SsiRecord(subject_id=subject_id, k=k, b=b, residual_rmse=rmse, n_points=len(pairs))


def predict_linear(record: SsiRecord, s: float) -> float:
    """Temperature predicted by the fitted line at saturation s."""
    return record.k * s + record.b


def save_records(records: dict[str, SsiRecord], path: str | Path) -> None:
    """Persist records keyed by subject id as JSON."""
    doc = {sid: asdict(rec) for sid, rec in sorted(records.items())}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_records(path: str | Path) -> dict[str, SsiRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"ssi records file not found: {path}")
    doc = json.loads(path.read_text())
    return {sid: SsiRecord(**fields) for sid, fields in doc.items()}
