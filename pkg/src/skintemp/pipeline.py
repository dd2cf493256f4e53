"""Stage functions behind the CLI: synth, magnify, fit-ssi, train, evaluate.

Directory layout under the run root:

    synth/<sid>/{frames/, clip.json, trace.csv, truth.json}
    magnified/<sid>/{frames/, clip.json, trace.csv}
    labels/<sid>.csv
    ssi_full.json, ssi_calibration.json
    split.json
    models/<variant>/{model.stck, checkpoints/, runlog.csv}
    reports/<variant>.json, <variant>.csv

Every stage is runnable standalone on the previous stage's outputs and is
deterministic given the same config and seed.
"""

from __future__ import annotations

import json
import shutil
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ConfigError, InsufficientDataError
from .evaluate import ErrorReport, build_report, write_per_frame_csv
from .imaging import ClipManifest, write_frame_png
from .labels import DenseLabels, TemperatureTrace, interpolate, label_frame
from .magnify import MagnifyConfig, VideoClip, denoise, magnify_clip
from .models import BackboneConfig, build_model, nipst_predict
from .ssi import fit_ssi, load_records, save_records
from .training import (
    DataSplit,
    SubjectData,
    TrainConfig,
    TrainResult,
    split_dataset,
    train,
    load_model_checkpoint,
)

NN_VARIANTS = ("nisdl1", "nisdl2", "dl")
ALL_VARIANTS = NN_VARIANTS + ("nipst",)


def stack_mean_saturation(images: np.ndarray) -> np.ndarray:
    """Per-frame mean saturation for an (n, h, w, 3) stack."""
    cmax = images.max(axis=3)
    cmin = images.min(axis=3)
    sat = np.zeros_like(cmax)
    nz = cmax > 0
    sat[nz] = (cmax[nz] - cmin[nz]) / cmax[nz]
    return sat.mean(axis=(1, 2))


def model_seed(global_seed: int, variant: str) -> int:
    """Stable per-variant seed derived from the run seed."""
    idx = NN_VARIANTS.index(variant)
    return int(np.random.SeedSequence([global_seed, idx]).generate_state(1)[0])


def run_synth(cfg: RunConfig, out_root: str | Path) -> list[str]:
    from .synthdata import generate_dataset

    profiles = generate_dataset(cfg.synth, Path(out_root) / "synth", cfg.seed)
    return [p.subject_id for p in profiles]


def magnify_one_clip(manifest_path: str | Path, cfg: RunConfig, out_dir: str | Path) -> Path:
    """Magnify a single clip manifest into out_dir; returns the new manifest path."""
    manifest_path = Path(manifest_path)
    manifest = ClipManifest.load(manifest_path)
    clip = VideoClip(frames=manifest.read_frames(manifest_path.parent),
                     frame_rate_hz=manifest.frame_rate_hz)
    mcfg = MagnifyConfig(
        xi=cfg.magnify.xi,
        pyramid_levels=cfg.magnify.pyramid_levels,
        low_cut_hz=cfg.magnify.low_cut_hz,
        high_cut_hz=cfg.magnify.high_cut_hz,
        frame_rate_hz=manifest.frame_rate_hz,
        denoise_radius=cfg.magnify.denoise_radius,
    )
    out = magnify_clip(denoise(clip, mcfg.denoise_radius), mcfg)
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    out_manifest = ClipManifest(frame_rate_hz=out.frame_rate_hz)
    for i, frame in enumerate(out.frames):
        rel = f"frames/f{i:06d}.png"
        write_frame_png(frame, out_dir / rel)
        out_manifest.add(rel, frame.timestamp)
    out_manifest.save(out_dir / "clip.json")
    return out_dir / "clip.json"


def run_magnify(cfg: RunConfig, out_root: str | Path) -> list[str]:
    """Magnify every synthesized subject clip, passing the trace through."""
    out_root = Path(out_root)
    synth_root = out_root / "synth"
    if not synth_root.exists():
        raise FileNotFoundError(f"synth output not found: {synth_root}")
    sids = sorted(p.name for p in synth_root.iterdir() if p.is_dir())
    for sid in sids:
        dst = out_root / "magnified" / sid
        magnify_one_clip(synth_root / sid / "clip.json", cfg, dst)
        shutil.copyfile(synth_root / sid / "trace.csv", dst / "trace.csv")
    return sids


def _window_pairs(sats: np.ndarray, times: np.ndarray, dense: DenseLabels) -> list[tuple[float, float]]:
    """One (mean saturation, label) pair per 5 s label window.

    Frames inside a window share one label, so their saturations are
    averaged into a single calibration pair instead of repeating the label.
    """
    t0 = dense.grid_times_s[0]
    idx = np.floor((times - t0) / dense.window_s + 1e-9).astype(int)
    idx = np.minimum(idx, dense.grid_times_s.size - 1)
    pairs = []
    for w in np.unique(idx):
        pairs.append((float(sats[idx == w].mean()), float(dense.grid_temps_c[w])))
    return pairs


def _load_clip_arrays(subject_dir: Path) -> tuple[np.ndarray, np.ndarray]:
    """(images, times) for one magnified subject directory."""
    manifest = ClipManifest.load(subject_dir / "clip.json")
    frames = manifest.read_frames(subject_dir)
    return np.stack([f.data for f in frames]), np.asarray([f.timestamp for f in frames])


def calibration_count(n_frames: int, fraction: float) -> int:
    return max(2, int(round(fraction * n_frames)))


def run_fit_ssi(cfg: RunConfig, out_root: str | Path) -> dict[str, dict]:
    """Dense labels plus full-span and calibration-prefix sensitivity fits."""
    out_root = Path(out_root)
    mag_root = out_root / "magnified"
    if not mag_root.exists():
        raise FileNotFoundError(f"magnified output not found: {mag_root}")
    labels_dir = out_root / "labels"
    labels_dir.mkdir(parents=True, exist_ok=True)
    full_records, cal_records = {}, {}
    for sid in sorted(p.name for p in mag_root.iterdir() if p.is_dir()):
        subject_dir = mag_root / sid
        trace = TemperatureTrace.load_csv(subject_dir / "trace.csv")
        dense = interpolate(trace)
        dense.save_csv(labels_dir / f"{sid}.csv")
        images, times = _load_clip_arrays(subject_dir)
        sats = stack_mean_saturation(images)
        n_cal = calibration_count(times.size, cfg.ssi.calibration_fraction)
        full_records[sid] = fit_ssi(_window_pairs(sats, times, dense), sid)
        cal_records[sid] = fit_ssi(_window_pairs(sats[:n_cal], times[:n_cal], dense), sid)
    save_records(full_records, out_root / "ssi_full.json")
    save_records(cal_records, out_root / "ssi_calibration.json")
    return {"full": full_records, "calibration": cal_records}


def load_subjects(cfg: RunConfig, out_root: str | Path) -> list[SubjectData]:
    """Assemble per-subject arrays from magnified frames, labels, and SSI fits."""
    out_root = Path(out_root)
    mag_root = out_root / "magnified"
    if not mag_root.exists():
        raise FileNotFoundError(f"magnified output not found: {mag_root}")
    full = load_records(out_root / "ssi_full.json")
    cal = load_records(out_root / "ssi_calibration.json")
    subjects = []
    for sid in sorted(p.name for p in mag_root.iterdir() if p.is_dir()):
        dense = DenseLabels.load_csv(out_root / "labels" / f"{sid}.csv")
        images, times = _load_clip_arrays(mag_root / sid)
        start, end = dense.span
        keep = (times >= start) & (times <= end)  # no label extrapolation
        images, times = images[keep], times[keep]
        labels = np.asarray([label_frame(dense, float(t)) for t in times])
        subjects.append(
            SubjectData(
                subject_id=sid,
                images=images,
                times_s=times,
                labels_c=labels,
                ssi_full=full[sid].k,
                ssi_calibration=cal[sid].k,
            )
        )
    return subjects


def make_split(cfg: RunConfig, subjects: list[SubjectData], out_root: str | Path) -> DataSplit:
    split = split_dataset(subjects, cfg.train)
    doc = {
        "seed": cfg.train.seed,
        "train": split.train_subject_ids,
        "test": split.test_subject_ids,
    }
    (Path(out_root) / "split.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    return split


def backbone_config(cfg: RunConfig) -> BackboneConfig:
    bcfg = BackboneConfig.for_profile(cfg.model.profile)
    if bcfg.input_side != cfg.synth.frame_side:
        raise ConfigError(
            f"model.profile {cfg.model.profile!r} expects {bcfg.input_side}px inputs "
            f"but synth.frame_side is {cfg.synth.frame_side}"
        )
    return bcfg


def run_train(
    cfg: RunConfig,
    out_root: str | Path,
    variant: str,
    subjects: list[SubjectData] | None = None,
    split: DataSplit | None = None,
) -> TrainResult:
    """Train one network variant and persist it under models/<variant>/."""
    if variant not in NN_VARIANTS:
        raise ConfigError(f"train expects a network variant {NN_VARIANTS}, got {variant!r}")
    out_root = Path(out_root)
    if subjects is None:
        subjects = load_subjects(cfg, out_root)
    if split is None:
        split = make_split(cfg, subjects, out_root)
    model = build_model(variant, backbone_config(cfg), seed=model_seed(cfg.seed, variant))
    return train(
        model,
        split.train,
        split.val,
        cfg.train,
        out_dir=out_root / "models" / variant,
        forbidden_subject_ids=set(split.test_subject_ids),
    )


def _test_subject_ids(out_root: Path) -> list[str]:
    split_path = out_root / "split.json"
    if not split_path.exists():
        raise FileNotFoundError(f"split file not found: {split_path}")
    return list(json.loads(split_path.read_text())["test"])


def run_evaluate(
    cfg: RunConfig,
    out_root: str | Path,
    variant: str,
    checkpoint: str | Path | None = None,
) -> ErrorReport:
    """Predict on the held-out portion of every test subject and report errors.

    The first `calibration_fraction` of each test subject's frames is
    calibration data (it produced the subject's sensitivity index and, for
    the linear baseline, its fitted line) and is excluded from scoring; all
    models are scored on the same remaining frames.
    """
    out_root = Path(out_root)
    if variant not in ALL_VARIANTS:
        raise ConfigError(f"unknown model variant {variant!r}")
    test_ids = _test_subject_ids(out_root)
    cal_records = load_records(out_root / "ssi_calibration.json")

    model = None
    if variant in NN_VARIANTS:
        ckpt = Path(checkpoint) if checkpoint else out_root / "models" / variant / "model.stck"
        model = load_model_checkpoint(ckpt)

    preds, truths, frame_ids = [], [], []
    for sid in test_ids:
        dense = DenseLabels.load_csv(out_root / "labels" / f"{sid}.csv")
        images, times = _load_clip_arrays(out_root / "magnified" / sid)
        start, end = dense.span
        keep = (times >= start) & (times <= end)
        images, times = images[keep], times[keep]
        labels = np.asarray([label_frame(dense, float(t)) for t in times])
        n_cal = calibration_count(times.size, cfg.ssi.calibration_fraction)
        if times.size - n_cal < 1:
            raise InsufficientDataError(f"subject {sid} has no frames beyond calibration")
        if variant == "nipst":
            sats = stack_mean_saturation(images)
            calibration = list(zip(sats[:n_cal].tolist(), labels[:n_cal].tolist()))
            pred = nipst_predict(calibration, sats[n_cal:])
        else:
            ssi_values = np.full(times.size - n_cal, cal_records[sid].k)
            pred = model.predict(images[n_cal:], ssi_values)
        preds.append(pred)
        truths.append(labels[n_cal:])
        frame_ids.extend(f"{sid}:{i}" for i in range(n_cal, times.size))

    pred = np.concatenate(preds)
    truth = np.concatenate(truths)
    report = build_report(pred, truth, model_id=variant)
    reports_dir = out_root / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    report.save_json(reports_dir / f"{variant}.json")
    write_per_frame_csv(reports_dir / f"{variant}.csv", frame_ids, pred, truth)
    return report


def run_pipeline(cfg: RunConfig, out_root: str | Path) -> dict[str, ErrorReport]:
    """synth -> magnify -> fit-ssi -> train (3 networks) -> evaluate (4 models)."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    cfg.to_json(out_root / "config.json")
    run_synth(cfg, out_root)
    run_magnify(cfg, out_root)
    run_fit_ssi(cfg, out_root)
    subjects = load_subjects(cfg, out_root)
    split = make_split(cfg, subjects, out_root)
    for variant in NN_VARIANTS:
        run_train(cfg, out_root, variant, subjects=subjects, split=split)
    reports = {variant: run_evaluate(cfg, out_root, variant) for variant in ALL_VARIANTS}
    summary = {variant: {"mean_c": r.mean_c, "median_c": r.median_c, "n": r.n}
               for variant, r in reports.items()}
    (out_root / "reports" / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return reports
