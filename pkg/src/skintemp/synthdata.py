"""Simulated thermal-stimulus recordings.

Each synthetic subject recovers exponentially from a warm-water stimulus:
T(t) = t_base + delta_t * exp(-t / tau_s). Frames are procedurally
textured skin patches whose mean saturation tracks the inverse of the
subject's linear saturation-temperature model, S(t) = (T(t) - b) / k,
plus optional frame-level gaussian noise. The contact-sensor trace samples
T(t) once per minute with uniform noise inside the logger uncertainty.

The texture keeps per-pixel saturation exactly equal to the frame target:
with a value field V and saturation s, pixels are (V, V*(1-s), V*(1-s)),
so (max-min)/max = s for every pixel regardless of V. All randomness is
derived from the subject's texture_seed, so identical profiles render
bitwise-identical clips.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import OutOfRangeError
from .imaging import ClipManifest, Frame, write_frame_png
from .labels import TemperatureTrace
from .magnify import VideoClip

IBUTTON_UNCERTAINTY_C = 0.125

# recovery curves anchored so the mid-recovery temperature is shared across
# subjects; keeps noise-free saturation inside [0.05, 0.95]
ANCHOR_TEMP_C = 34.5
ANCHOR_SATURATION = 0.5


@dataclass(frozen=True)
class SubjectProfile:
    subject_id: str
    k_true: float  # degC per unit saturation
    b_true: float  # degC
    t_base: float  # degC, post-recovery baseline
    delta_t: float  # degC, stimulus elevation at t = 0
    tau_s: float  # seconds, recovery time constant
    texture_seed: int

    def __post_init__(self):
        if self.k_true == 0:
            raise OutOfRangeError("k_true must be nonzero")
        if self.tau_s <= 0 or self.delta_t <= 0:
            raise OutOfRangeError("tau_s and delta_t must be positive")


@dataclass(frozen=True)
class SynthDatasetSpec:
    n_subjects: int = 16
    duration_s: float = 3000.0
    frame_rate_hz: float = 2.0
    frame_side: int = 32
    saturation_noise_sigma: float = 0.015
    label_period_s: float = 60.0
    trace_noise_c: float = IBUTTON_UNCERTAINTY_C  # 0 gives a noise-free trace

    def __post_init__(self):
        if self.n_subjects < 2:
            raise OutOfRangeError("need at least 2 subjects for a train/test split")


def temperature_curve(profile: SubjectProfile, t: float | np.ndarray):
    """Skin temperature at time t seconds after the stimulus ends."""
    return profile.t_base + profile.delta_t * np.exp(-np.asarray(t, dtype=np.float64) / profile.tau_s)


def saturation_curve(profile: SubjectProfile, t: float | np.ndarray):
    """Noise-free mean saturation: the inverse of the linear model."""
    return (temperature_curve(profile, t) - profile.b_true) / profile.k_true


def sample_profiles(spec: SynthDatasetSpec, seed: int, k_range=(4.0, 12.0)) -> list[SubjectProfile]:
    """Per-subject profiles with sensitivities stratified over k_range.

    Stratification guarantees heterogeneous sensitivities for every seed.
    The recovery is anchored at a shared mid-recovery point
    (T = 34.5 degC at S = 0.5), so b_true = 34.5 - 0.5 * k_true and
    t_base = 34.5 - delta_t / 2. The stimulus elevation scales with the
    sensitivity (delta_t near 0.3 * k_true, clipped to [2, 4]), keeping
    every subject's saturation excursion in a comparable band well inside
    the renderable range.
    """
    rng = np.random.default_rng(np.random.PCG64(seed))
    n = spec.n_subjects
    k_lo, k_hi = k_range
    strata = rng.permutation(n)
    profiles = []
    for i in range(n):
        k = k_lo + (k_hi - k_lo) * (strata[i] + rng.uniform()) / n
        delta = float(np.clip(0.3 * k * rng.uniform(0.95, 1.05), 2.0, min(4.0, 0.9 * k)))
        t_base = ANCHOR_TEMP_C - delta / 2.0
        tau = rng.uniform(400.0, 1200.0)
        profiles.append(
            SubjectProfile(
                subject_id=f"s{i:02d}",
                k_true=float(k),
                b_true=float(ANCHOR_TEMP_C - ANCHOR_SATURATION * k),
                t_base=float(t_base),
                delta_t=delta,
                tau_s=float(tau),
                texture_seed=int(rng.integers(0, 2**31 - 1)),
            )
        )
    return profiles


def _value_field(side: int, rng: np.random.Generator) -> np.ndarray:
    """Brightness texture for one frame: smooth value noise in roughly
    [0.55, 0.95], shifted to mean 0.75. A fresh field is drawn per frame
    (camera noise and micro-movement), so no frame carries a stable
    subject signature beyond its saturation."""
    cells = max(2, side // 4)
    coarse = rng.uniform(0.0, 1.0, size=(cells + 1, cells + 1))
    pos = np.linspace(0.0, cells, side)
    i0 = np.clip(pos.astype(int), 0, cells - 1)
    frac = pos - i0
    # separable bilinear interpolation of the coarse grid
    rows = coarse[i0, :] * (1.0 - frac[:, None]) + coarse[i0 + 1, :] * frac[:, None]
    field = rows[:, i0] * (1.0 - frac[None, :]) + rows[:, i0 + 1] * frac[None, :]
    field = 0.55 + 0.40 * field
    field = field + (0.75 - field.mean())
    return np.clip(field, 0.05, 1.0)


def render_frame(value_field: np.ndarray, saturation: float, timestamp: float) -> Frame:
    """Skin-like patch whose every pixel has exactly the given saturation."""
    s = float(np.clip(saturation, 0.0, 1.0))
    data = np.empty(value_field.shape + (3,))
    data[:, :, 0] = value_field
    data[:, :, 1] = value_field * (1.0 - s)
    data[:, :, 2] = value_field * (1.0 - s)
    return Frame(data=data, timestamp=timestamp)


def render_clip(profile: SubjectProfile, spec: SynthDatasetSpec) -> tuple[VideoClip, TemperatureTrace]:
    """Render one subject's clip and its sparse contact-sensor trace."""
    n_frames = int(round(spec.duration_s * spec.frame_rate_hz))
    frame_times = np.arange(n_frames) / spec.frame_rate_hz
    trace_times = np.arange(0.0, spec.duration_s + 1e-9, spec.label_period_s)

    clean_s = saturation_curve(profile, frame_times)
    check_times = np.concatenate([frame_times, trace_times])
    check_s = saturation_curve(profile, check_times)
    bad = (check_s < 0.02) | (check_s > 0.98)
    if np.any(bad):
        t_bad = float(check_times[np.argmax(bad)])
        raise OutOfRangeError(
            f"noise-free saturation leaves [0.02, 0.98] at t = {t_bad} s "
            f"(subject {profile.subject_id})"
        )

    rng = np.random.default_rng(np.random.PCG64(profile.texture_seed))
    noise = (
        rng.normal(0.0, spec.saturation_noise_sigma, size=n_frames)
        if spec.saturation_noise_sigma > 0
        else np.zeros(n_frames)
    )
    frames = [
        render_frame(
            _value_field(spec.frame_side, rng),
            clean_s[i] + noise[i],
            timestamp=float(frame_times[i]),
        )
        for i in range(n_frames)
    ]
    clip = VideoClip(frames=frames, frame_rate_hz=spec.frame_rate_hz)

    trace_noise = (
        rng.uniform(-spec.trace_noise_c, spec.trace_noise_c, size=trace_times.size)
        if spec.trace_noise_c > 0
        else np.zeros(trace_times.size)
    )
    trace = TemperatureTrace(
        times_s=trace_times,
        temps_c=temperature_curve(profile, trace_times) + trace_noise,
        source_uncertainty_c=spec.trace_noise_c,
    )
    return clip, trace


def write_subject_dir(
    out_dir: str | Path,
    profile: SubjectProfile,
    clip: VideoClip,
    trace: TemperatureTrace,
) -> None:
    """Persist one subject: frames/, clip.json, trace.csv, truth.json.

    truth.json carries the generating parameters and the noise-free dense
    temperature at every frame time; it exists for tests only and is never
    read by the training pipeline.
    """
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    manifest = ClipManifest(frame_rate_hz=clip.frame_rate_hz)
    for i, frame in enumerate(clip.frames):
        rel = f"frames/f{i:06d}.png"
        write_frame_png(frame, out / rel)
        manifest.add(rel, frame.timestamp)
    manifest.save(out / "clip.json")
    trace.save_csv(out / "trace.csv")
    truth = asdict(profile)
    truth["frame_times_s"] = [f.timestamp for f in clip.frames]
    truth["dense_temp_c"] = [float(v) for v in temperature_curve(profile, np.asarray([f.timestamp for f in clip.frames]))]
    (out / "truth.json").write_text(json.dumps(truth, indent=1))


def generate_dataset(spec: SynthDatasetSpec, out_root: str | Path, seed: int) -> list[SubjectProfile]:
    """Render and persist every subject under out_root/<subject_id>/."""
    profiles = sample_profiles(spec, seed)
    for profile in profiles:
        clip, trace = render_clip(profile, spec)
        write_subject_dir(Path(out_root) / profile.subject_id, profile, clip, trace)
    return profiles
