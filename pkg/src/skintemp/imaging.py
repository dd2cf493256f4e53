"""Frame representation, saturation extraction, ROI cropping, and frame I/O.

Pixels are stored as float64 in [0, 1]; 8-bit image files are divided by 255
at ingestion. Saturation uses the value-based HSV definition
S = (max - min) / max with S = 0 for black pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BoundsError, ShapeMismatchError


@dataclass(frozen=True)
class Frame:
    """A single RGB video frame with its time offset from clip start."""

    data: np.ndarray  # (height, width, 3) float64 in [0, 1]
    timestamp: float = 0.0

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeMismatchError(
                f"frame data must be (height, width, 3), got {arr.shape}"
            )
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ShapeMismatchError("frame pixel values must lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class RoiSpec:
    """Axis-aligned square region of interest, in pixel coordinates."""

    origin_x: int
    origin_y: int
    side: int = 150

    def validate_within(self, frame: Frame) -> None:
        if self.side <= 0:
            raise BoundsError(f"roi side must be positive, got {self.side}")
        if self.origin_x < 0 or self.origin_y < 0:
            raise BoundsError(
                f"roi origin ({self.origin_x}, {self.origin_y}) has a negative coordinate"
            )
        if self.origin_x + self.side > frame.width:
            raise BoundsError(
                f"roi right edge {self.origin_x + self.side} exceeds frame width {frame.width}"
            )
        if self.origin_y + self.side > frame.height:
            raise BoundsError(
                f"roi bottom edge {self.origin_y + self.side} exceeds frame height {frame.height}"
            )


def rgb_to_hsv_saturation(frame: Frame) -> np.ndarray:
    """Per-pixel HSV saturation map, same height/width as the frame.

    S = (max - min) / max over the RGB channels, 0 where max is 0.
    """
    rgb = frame.data
    cmax = rgb.max(axis=2)
    cmin = rgb.min(axis=2)
    sat = np.zeros_like(cmax)
    nonzero = cmax > 0.0
    sat[nonzero] = (cmax[nonzero] - cmin[nonzero]) / cmax[nonzero]
    return sat


def crop_roi(frame: Frame, roi: RoiSpec) -> Frame:
    """Extract the square ROI; raises BoundsError naming the violating edge."""
    roi.validate_within(frame)
    block = frame.data[
        roi.origin_y : roi.origin_y + roi.side,
        roi.origin_x : roi.origin_x + roi.side,
        :,
    ]
    return Frame(data=block.copy(), timestamp=frame.timestamp)


def mean_saturation(frame: Frame) -> float:
    """Arithmetic mean of the saturation map over all pixels."""
    return float(rgb_to_hsv_saturation(frame).mean())


def write_frame_png(frame: Frame, path: str | Path) -> None:
    """Write a frame as 8-bit RGB PNG (values rounded to the nearest level)."""
    levels = np.rint(frame.data * 255.0).astype(np.uint8)
    Image.fromarray(levels, mode="RGB").save(Path(path), format="PNG")


def read_frame_png(path: str | Path, timestamp: float = 0.0) -> Frame:
    """Read an 8-bit RGB PNG into a [0, 1] float frame."""
    with Image.open(Path(path)) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return Frame(data=arr, timestamp=timestamp)


@dataclass
class ClipManifest:
    """Ordered frame files of one clip plus its frame rate.

    Serialized as JSON with frame paths relative to the manifest file.
    """

    frame_rate_hz: float
    entries: list[tuple[str, float]] = field(default_factory=list)  # (path, time_s)

    def add(self, path: str, time_s: float) -> None:
        self.entries.append((path, time_s))

    def save(self, path: str | Path) -> None:
        doc = {
            "frame_rate_hz": self.frame_rate_hz,
            "frames": [{"path": p, "time_s": t} for p, t in self.entries],
        }
        Path(path).write_text(json.dumps(doc, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "ClipManifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"clip manifest not found: {path}")
        doc = json.loads(path.read_text())
        manifest = cls(frame_rate_hz=float(doc["frame_rate_hz"]))
        for item in doc["frames"]:
            manifest.add(str(item["path"]), float(item["time_s"]))
        return manifest

    def read_frames(self, base_dir: str | Path) -> list[Frame]:
        base = Path(base_dir)
        return [read_frame_png(base / p, timestamp=t) for p, t in self.entries]
