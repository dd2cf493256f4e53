"""Subtleness magnification of a video clip.

Each frame is decomposed into a Laplacian pyramid; every level's per-pixel
time series is band-pass filtered with the difference of two first-order
IIR lowpass filters, scaled by the amplification coefficient, added back,
and the pyramid is recollapsed. With coefficient 0 the clip is returned
unchanged (the reconstruction is algebraically exact).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InsufficientDataError
from .imaging import Frame

# binomial 5-tap used for pyramid down/up sampling
_PYR_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass(frozen=True)
class MagnifyConfig:
    xi: float = 10.0
    pyramid_levels: int = 3
    low_cut_hz: float = 0.05
    high_cut_hz: float = 1.0
    frame_rate_hz: float = 30.0
    denoise_radius: float = 1.0

    def validate(self) -> None:
        if not (0.0 < self.low_cut_hz < self.high_cut_hz < self.frame_rate_hz / 2.0):
            raise ConfigError(
                "band edges must satisfy 0 < low_cut_hz < high_cut_hz < frame_rate_hz / 2 "
                f"(got low_cut_hz={self.low_cut_hz}, high_cut_hz={self.high_cut_hz}, "
                f"frame_rate_hz={self.frame_rate_hz})"
            )
        if self.xi < 0:
            raise ConfigError(f"xi must be non-negative, got xi={self.xi}")
        if self.pyramid_levels < 1:
            raise ConfigError(f"pyramid_levels must be >= 1, got {self.pyramid_levels}")
        if self.denoise_radius < 0:
            raise ConfigError(f"denoise_radius must be >= 0, got {self.denoise_radius}")


@dataclass(frozen=True)
class VideoClip:
    """Ordered frames at a fixed rate; timestamps spaced by 1/frame_rate_hz."""

    frames: list[Frame]
    frame_rate_hz: float

    def stack(self) -> np.ndarray:
        """(n_frames, height, width, 3) float64 view of the clip."""
        return np.stack([f.data for f in self.frames], axis=0)

    @classmethod
    def from_stack(cls, data: np.ndarray, frame_rate_hz: float, t0: float = 0.0) -> "VideoClip":
        dt = 1.0 / frame_rate_hz
        frames = [Frame(data=data[i], timestamp=t0 + i * dt) for i in range(data.shape[0])]
        return cls(frames=frames, frame_rate_hz=frame_rate_hz)


def gaussian_kernel(radius: float) -> np.ndarray:
    """Normalized 1-D Gaussian with sigma = radius, truncated at 3 sigma."""
    half = max(1, int(np.ceil(3.0 * radius)))
    x = np.arange(-half, half + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / radius) ** 2)
    return kernel / kernel.sum()


def _convolve_axis(data: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """1-D convolution along one axis with symmetric (reflect) padding."""
    half = kernel.size // 2
    moved = np.moveaxis(data, axis, 0)
    padded = np.pad(moved, [(half, half)] + [(0, 0)] * (moved.ndim - 1), mode="symmetric")
    out = np.zeros_like(moved)
    for i, w in enumerate(kernel):
        out += w * padded[i : i + moved.shape[0]]
    return np.moveaxis(out, 0, axis)


def gaussian_blur(image: np.ndarray, radius: float) -> np.ndarray:
    """Separable Gaussian blur of an (H, W, C) image; radius 0 is identity."""
    if radius == 0:
        return image.copy()
    kernel = gaussian_kernel(radius)
    return _convolve_axis(_convolve_axis(image, kernel, 0), kernel, 1)


def denoise(clip: VideoClip, radius: float) -> VideoClip:
    """Per-frame spatial Gaussian blur. Radius 0 returns the clip unchanged."""
    if radius < 0:
        raise ConfigError(f"denoise_radius must be >= 0, got {radius}")
    if radius == 0:
        return clip
    frames = [
        Frame(data=np.clip(gaussian_blur(f.data, radius), 0.0, 1.0), timestamp=f.timestamp)
        for f in clip.frames
    ]
    return VideoClip(frames=frames, frame_rate_hz=clip.frame_rate_hz)


def _pyr_down(image: np.ndarray) -> np.ndarray:
    blurred = _convolve_axis(_convolve_axis(image, _PYR_KERNEL, 0), _PYR_KERNEL, 1)
    return blurred[::2, ::2]


def _pyr_up(image: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    h, w = out_shape
    stuffed = np.zeros((h, w) + image.shape[2:], dtype=image.dtype)
    stuffed[::2, ::2] = image
    # kernel doubled per axis to compensate the zero stuffing
    up = _convolve_axis(_convolve_axis(stuffed, 2.0 * _PYR_KERNEL, 0), 2.0 * _PYR_KERNEL, 1)
    return up


def build_pyramid(image: np.ndarray, levels: int) -> list[np.ndarray]:
    """Laplacian pyramid: `levels` difference bands plus the lowpass residual."""
    bands = []
    current = image
    for _ in range(levels):
        if min(current.shape[0], current.shape[1]) < 4:
            break  # too small to split further
        down = _pyr_down(current)
        bands.append(current - _pyr_up(down, current.shape[:2]))
        current = down
    bands.append(current)
    return bands


def collapse_pyramid(bands: list[np.ndarray]) -> np.ndarray:
    """Exact inverse of build_pyramid."""
    current = bands[-1]
    for band in reversed(bands[:-1]):
        current = band + _pyr_up(current, band.shape[:2])
    return current


def temporal_bandpass(signal: np.ndarray, cfg: MagnifyConfig) -> np.ndarray:
    """Difference-of-lowpasses IIR bandpass along axis 0 of `signal`.

    Each one-pole lowpass uses the matched-z coefficient
    r = 1 - exp(-2*pi*f_cut / f_s). Filter state starts at the first
    sample, so a constant signal maps to exactly zero.
    """
    cfg.validate()
    x = np.asarray(signal, dtype=np.float64)
    if x.shape[0] < 2:
        raise InsufficientDataError(f"bandpass needs >= 2 samples, got {x.shape[0]}")
    r_lo = 1.0 - np.exp(-2.0 * np.pi * cfg.low_cut_hz / cfg.frame_rate_hz)
    r_hi = 1.0 - np.exp(-2.0 * np.pi * cfg.high_cut_hz / cfg.frame_rate_hz)
    state_hi = x[0].copy() if x.ndim > 1 else np.float64(x[0])
    state_lo = x[0].copy() if x.ndim > 1 else np.float64(x[0])
    out = np.zeros_like(x)
    for i in range(1, x.shape[0]):
        state_hi = state_hi + r_hi * (x[i] - state_hi)
        state_lo = state_lo + r_lo * (x[i] - state_lo)
        out[i] = state_hi - state_lo
    return out


def magnify_clip(clip: VideoClip, cfg: MagnifyConfig) -> VideoClip:
    """Amplify in-band temporal variation of every pyramid level by cfg.xi.

    output(x, t) = input(x, t) + xi * bandpassed(x, t), reconstructed and
    clamped to [0, 1]. Denoising is a separate preprocessing step (see
    `denoise`); it is not applied here so that xi = 0 is an identity.
    """
    cfg.validate()
    if len(clip.frames) < 2:
        raise InsufficientDataError(
            f"magnification needs >= 2 frames, got {len(clip.frames)}"
        )
    pyramids = [build_pyramid(f.data, cfg.pyramid_levels) for f in clip.frames]
    n_levels = len(pyramids[0])
    out_frames = []
    filtered_levels = []
    for level in range(n_levels):
        series = np.stack([pyr[level] for pyr in pyramids], axis=0)
        filtered_levels.append(temporal_bandpass(series, cfg))
    for i, frame in enumerate(clip.frames):
        bands = [
            pyramids[i][level] + cfg.xi * filtered_levels[level][i]
            for level in range(n_levels)
        ]
        data = np.clip(collapse_pyramid(bands), 0.0, 1.0)
        out_frames.append(Frame(data=data, timestamp=frame.timestamp))
    return VideoClip(frames=out_frames, frame_rate_hz=clip.frame_rate_hz)
