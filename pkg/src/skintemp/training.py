"""Dataset splitting and the training loop.

Subjects are partitioned train:test = 3:1 by a seeded shuffle (the frame
counts follow the 12:4 subject split of the recording protocol); validation
frames are drawn from training subjects only and held out of the gradient
batches. Training runs full epochs of seeded-shuffled mini-batches; after
every `checkpoint_every_images` training images the validation MAE is
measured and a checkpoint is persisted when it beats the threshold. The
final model is always persisted.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import nn
from .errors import DivergenceError, InsufficientDataError, SkinTempError
from .models import FusionModel


class ProvenanceError(SkinTempError):
    """A test-subject frame reached a gradient step or validation pass."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 8
    validation_size: int = 500
    checkpoint_threshold_c: float = 0.46
    checkpoint_every_images: int = 3000
    learning_rate: float = 1e-3
    seed: int = 0


@dataclass
class SubjectData:
    """One subject's assembled frames plus its fitted sensitivity indices.

    ssi_full is fitted on the whole labeled span (used when the subject
    lands in the training set); ssi_calibration is fitted on the causal
    calibration prefix (used when the subject lands in the test set).
    """

    subject_id: str
    images: np.ndarray  # (m, side, side, 3)
    times_s: np.ndarray  # (m,)
    labels_c: np.ndarray  # (m,)
    ssi_full: float
    ssi_calibration: float


@dataclass
class FrameBatch:
    images: np.ndarray
    ssi: np.ndarray
    labels: np.ndarray
    times_s: np.ndarray
    subject_ids: np.ndarray  # per-frame provenance tag

    @property
    def n(self) -> int:
        return self.images.shape[0]

    def take(self, idx: np.ndarray) -> "FrameBatch":
        return FrameBatch(
            images=self.images[idx],
            ssi=self.ssi[idx],
            labels=self.labels[idx],
            times_s=self.times_s[idx],
            subject_ids=self.subject_ids[idx],
        )


@dataclass
class DataSplit:
    train: FrameBatch
    val: FrameBatch
    test: FrameBatch
    train_subject_ids: list[str]
    test_subject_ids: list[str]


def _assemble(subjects: list[SubjectData], use_calibration_ssi: bool) -> FrameBatch:
    return FrameBatch(
        images=np.concatenate([s.images for s in subjects]),
        ssi=np.concatenate(
            [
                np.full(s.images.shape[0], s.ssi_calibration if use_calibration_ssi else s.ssi_full)
                for s in subjects
            ]
        ),
        labels=np.concatenate([s.labels_c for s in subjects]),
        times_s=np.concatenate([s.times_s for s in subjects]),
        subject_ids=np.concatenate(
            [np.full(s.images.shape[0], s.subject_id, dtype=object) for s in subjects]
        ),
    )


def split_dataset(subjects: list[SubjectData], cfg: TrainConfig) -> DataSplit:
    """Partition subjects 3:1 (seeded), carve out the validation frames."""
    if len(subjects) < 4:
        raise InsufficientDataError(
            f"need at least 4 subjects for a 3:1 split, got {len(subjects)}"
        )
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    order = rng.permutation(len(subjects))
    n_test = max(1, int(round(len(subjects) / 4)))
    test_idx = sorted(order[:n_test])
    train_idx = sorted(order[n_test:])
    train_subjects = [subjects[i] for i in train_idx]
    test_subjects = [subjects[i] for i in test_idx]

    pool = _assemble(train_subjects, use_calibration_ssi=False)
    if cfg.validation_size >= pool.n:
        raise InsufficientDataError(
            f"validation_size {cfg.validation_size} >= training frames {pool.n}"
        )
    val_pick = rng.choice(pool.n, size=cfg.validation_size, replace=False)
    val_mask = np.zeros(pool.n, dtype=bool)
    val_mask[val_pick] = True
    return DataSplit(
        train=pool.take(np.flatnonzero(~val_mask)),
        val=pool.take(np.flatnonzero(val_mask)),
        test=_assemble(test_subjects, use_calibration_ssi=True),
        train_subject_ids=[s.subject_id for s in train_subjects],
        test_subject_ids=[s.subject_id for s in test_subjects],
    )


@dataclass
class CheckpointEvent:
    images_seen: int
    val_mae_c: float
    wall_time_s: float
    saved_path: str = ""


@dataclass
class TrainResult:
    checkpoint_log: list[CheckpointEvent] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    final_path: str = ""


def mean_absolute_error(model: FusionModel, batch: FrameBatch) -> float:
    pred = model.predict(batch.images, batch.ssi)
    return float(np.mean(np.abs(pred - batch.labels)))


def _check_provenance(subject_ids: np.ndarray, forbidden: set[str], where: str) -> None:
    leaked = set(subject_ids.tolist()) & forbidden
    if leaked:
        raise ProvenanceError(f"test-subject frames {sorted(leaked)} leaked into {where}")


def train(
    model: FusionModel,
    train_batch: FrameBatch,
    val_batch: FrameBatch,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    forbidden_subject_ids: set[str] | None = None,
) -> TrainResult:
    """Run the training schedule; returns the checkpoint log.

    `forbidden_subject_ids` are the test subjects; every batch and the
    validation set are checked against them before use.
    """
    if train_batch.n == 0:
        raise InsufficientDataError("empty training set")
    forbidden = forbidden_subject_ids or set()
    _check_provenance(val_batch.subject_ids, forbidden, "the validation set")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    # regress on residuals around the training-label mean; the offset is
    # restored inside the model and persisted with the checkpoint
    model.output_offset = float(np.mean(train_batch.labels))

    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    params = model.params()
    result = TrainResult()
    images_seen = 0
    next_mark = cfg.checkpoint_every_images
    batch_index = 0
    t_start = time.perf_counter()

    for _epoch in range(cfg.epochs):
        order = rng.permutation(train_batch.n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, train_batch.n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _check_provenance(train_batch.subject_ids[idx], forbidden, "a gradient step")
            pred = model.forward(train_batch.images[idx], train_batch.ssi[idx])
            loss, grad = nn.mse_loss(pred, train_batch.labels[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at batch index {batch_index}")
            model.backward(grad)
            nn.sgd_step(params, cfg.learning_rate)
            epoch_loss += loss
            n_batches += 1
            batch_index += 1
            images_seen += idx.size
            while images_seen >= next_mark:
                val_mae = mean_absolute_error(model, val_batch)
                event = CheckpointEvent(
                    images_seen=next_mark,
                    val_mae_c=val_mae,
                    wall_time_s=time.perf_counter() - t_start,
                )
                if out is not None and val_mae < cfg.checkpoint_threshold_c:
                    path = out / "checkpoints" / f"ckpt_{next_mark:08d}.stck"
                    _save_model(path, model, cfg)
                    event.saved_path = str(path)
                result.checkpoint_log.append(event)
                next_mark += cfg.checkpoint_every_images
        result.epoch_losses.append(epoch_loss / max(n_batches, 1))

    if out is not None:
        final = out / "model.stck"
        _save_model(final, model, cfg)
        result.final_path = str(final)
        _write_runlog(out / "runlog.csv", result.checkpoint_log)
    return result


def _save_model(path: Path, model: FusionModel, cfg: TrainConfig) -> None:
    nn.save_checkpoint(
        path,
        model_id=model.variant,
        config=model.config_dict(),
        seed=cfg.seed,
        tensors=model.to_tensors(),
        extras={"output_offset": model.output_offset, "train_config": asdict(cfg)},
    )


def _write_runlog(path: Path, log: list[CheckpointEvent]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["images_seen", "val_mae", "wall_time_s"])
        for event in log:
            writer.writerow([event.images_seen, repr(event.val_mae_c), f"{event.wall_time_s:.3f}"])


def load_model_checkpoint(path: str | Path):
    """Rebuild a FusionModel from a checkpoint file."""
    from .models import BackboneConfig, build_model

    header, tensors = nn.load_checkpoint(path)
    cfg_doc = dict(header["config"])
    variant = cfg_doc.pop("variant")
    cfg_doc["stage_channels"] = tuple(cfg_doc["stage_channels"])
    cfg = BackboneConfig(**cfg_doc)
    model = build_model(variant, cfg, seed=int(header["seed"]))
    model.load_tensors(tensors)
    model.output_offset = float(header["extras"].get("output_offset", 0.0))
    return model
