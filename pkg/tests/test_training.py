import numpy as np
import pytest

from skintemp.errors import DivergenceError, InsufficientDataError
from skintemp.models import BackboneConfig, build_model
from skintemp.training import (
    FrameBatch,
    ProvenanceError,
    SubjectData,
    TrainConfig,
    load_model_checkpoint,
    split_dataset,
    train,
)

TINY = BackboneConfig(input_side=16, feature_dim=12, spatial_out=2, stage_channels=(3, 4))


def make_subject(sid, n_frames, rng, k=8.0):
    times = np.arange(n_frames) / 2.0
    s = 0.5 + 0.2 * np.cos(times / 30.0)
    labels = k * (s - 0.5) + 34.5 + rng.normal(0, 0.05, n_frames)
    images = np.empty((n_frames, 16, 16, 3))
    v = rng.uniform(0.55, 0.95, (n_frames, 16, 16))
    images[:, :, :, 0] = v
    images[:, :, :, 1] = v * (1 - s[:, None, None])
    images[:, :, :, 2] = v * (1 - s[:, None, None])
    return SubjectData(
        subject_id=sid,
        images=images,
        times_s=times,
        labels_c=labels,
        ssi_full=k,
        ssi_calibration=k * 0.97,
    )


def make_subjects(n_subjects, n_frames, seed=0):
    rng = np.random.default_rng(seed)
    return [make_subject(f"s{i:02d}", n_frames, rng, k=4.0 + i) for i in range(n_subjects)]


def small_cfg(**kwargs):
    defaults = dict(batch_size=8, epochs=2, validation_size=20,
                    checkpoint_every_images=64, learning_rate=1e-3, seed=0)
    defaults.update(kwargs)
    return TrainConfig(**defaults)


# -- split --


def test_split_sixteen_subjects_is_twelve_four():
    split = split_dataset(make_subjects(16, 12), small_cfg(validation_size=10))
    assert len(split.train_subject_ids) == 12
    assert len(split.test_subject_ids) == 4


def test_split_four_subjects_is_three_one():
    split = split_dataset(make_subjects(4, 12), small_cfg(validation_size=5))
    assert len(split.train_subject_ids) == 3
    assert len(split.test_subject_ids) == 1


def test_split_deterministic_under_seed():
    subjects = make_subjects(8, 10)
    a = split_dataset(subjects, small_cfg(validation_size=8, seed=5))
    b = split_dataset(subjects, small_cfg(validation_size=8, seed=5))
    assert a.train_subject_ids == b.train_subject_ids
    assert a.test_subject_ids == b.test_subject_ids
    assert np.array_equal(a.val.labels, b.val.labels)


def test_split_subject_sets_disjoint():
    split = split_dataset(make_subjects(8, 10), small_cfg(validation_size=8))
    assert not set(split.train_subject_ids) & set(split.test_subject_ids)
    assert set(split.val.subject_ids.tolist()) <= set(split.train_subject_ids)
    assert set(split.test.subject_ids.tolist()) == set(split.test_subject_ids)


def test_split_needs_four_subjects():
    with pytest.raises(InsufficientDataError):
        split_dataset(make_subjects(3, 10), small_cfg())


def test_split_frames_carry_image_ssi_label():
    split = split_dataset(make_subjects(4, 10), small_cfg(validation_size=4))
    assert split.train.images.shape[1:] == (16, 16, 3)
    assert split.train.ssi.shape == (split.train.n,)
    assert split.train.labels.shape == (split.train.n,)
    # test subjects carry their calibration-prefix index, train their full fit
    test_sid = split.test_subject_ids[0]
    k = 4.0 + int(test_sid[1:])
    assert np.allclose(split.test.ssi, k * 0.97)


def test_validation_frames_held_out_of_training_pool():
    split = split_dataset(make_subjects(4, 50), small_cfg(validation_size=30))
    assert split.val.n == 30
    assert split.train.n + split.val.n == 3 * 50


# -- train --


def test_epochs_zero_keeps_initial_params():
    split = split_dataset(make_subjects(4, 12), small_cfg(validation_size=5))
    model = build_model("dl", TINY, seed=1)
    before = {p.name: p.value.copy() for p in model.params()}
    result = train(model, split.train, split.val, small_cfg(epochs=0, validation_size=5))
    assert result.checkpoint_log == []
    for p in model.params():
        assert np.array_equal(p.value, before[p.name])


def test_overfits_single_sample():
    rng = np.random.default_rng(7)
    subject = make_subject("s00", 1, rng)
    batch = FrameBatch(
        images=subject.images,
        ssi=np.array([subject.ssi_full]),
        labels=subject.labels_c,
        times_s=subject.times_s,
        subject_ids=np.array(["s00"], dtype=object),
    )
    model = build_model("nisdl2", TINY, seed=2)
    cfg = small_cfg(epochs=200, batch_size=1, validation_size=0,
                    checkpoint_every_images=10**9, learning_rate=0.02)
    result = train(model, batch, batch, cfg)
    pred = model.predict(batch.images, batch.ssi)
    assert float(np.abs(pred - batch.labels).mean()) < 0.05
    assert len(result.epoch_losses) == 200


def test_checkpoint_log_length_matches_schedule():
    split = split_dataset(make_subjects(4, 40), small_cfg(validation_size=8))
    cfg = small_cfg(validation_size=8, epochs=3, checkpoint_every_images=50)
    model = build_model("dl", TINY, seed=3)
    result = train(model, split.train, split.val, cfg)
    expected = (cfg.epochs * split.train.n) // cfg.checkpoint_every_images
    assert len(result.checkpoint_log) == expected
    assert [e.images_seen for e in result.checkpoint_log] == [
        50 * (i + 1) for i in range(expected)
    ]


def test_checkpoint_persisted_when_below_threshold(tmp_path):
    split = split_dataset(make_subjects(4, 30), small_cfg(validation_size=8))
    cfg = small_cfg(validation_size=8, epochs=2, checkpoint_every_images=40,
                    checkpoint_threshold_c=1e9)  # every validation qualifies
    model = build_model("dl", TINY, seed=4)
    result = train(model, split.train, split.val, cfg, out_dir=tmp_path)
    assert (tmp_path / "model.stck").exists()
    assert (tmp_path / "runlog.csv").exists()
    saved = [e for e in result.checkpoint_log if e.saved_path]
    assert len(saved) == len(result.checkpoint_log)
    reloaded = load_model_checkpoint(result.final_path)
    pred_a = model.predict(split.val.images, split.val.ssi)
    pred_b = reloaded.predict(split.val.images, split.val.ssi)
    assert np.array_equal(pred_a, pred_b)


def test_no_checkpoint_above_threshold(tmp_path):
    split = split_dataset(make_subjects(4, 30), small_cfg(validation_size=8))
    cfg = small_cfg(validation_size=8, epochs=1, checkpoint_every_images=40,
                    checkpoint_threshold_c=0.0)
    model = build_model("dl", TINY, seed=5)
    result = train(model, split.train, split.val, cfg, out_dir=tmp_path)
    assert all(not e.saved_path for e in result.checkpoint_log)
    assert (tmp_path / "model.stck").exists()  # final model always persisted


def test_reproducible_checkpoint_log():
    subjects = make_subjects(4, 30)

    def run():
        split = split_dataset(subjects, small_cfg(validation_size=8))
        model = build_model("nisdl1", TINY, seed=6)
        return train(model, split.train, split.val,
                     small_cfg(validation_size=8, epochs=2, checkpoint_every_images=40))

    log_a = [(e.images_seen, e.val_mae_c) for e in run().checkpoint_log]
    log_b = [(e.images_seen, e.val_mae_c) for e in run().checkpoint_log]
    assert log_a == log_b


def test_training_loss_trend_non_increasing_smoothed():
    # train count divisible by the batch size, so epoch means are comparable
    split = split_dataset(make_subjects(4, 20), small_cfg(validation_size=4))
    assert split.train.n % 8 == 0
    model = build_model("dl", TINY, seed=7)
    cfg = small_cfg(validation_size=4, epochs=25, learning_rate=5e-4,
                    checkpoint_every_images=10**9)
    result = train(model, split.train, split.val, cfg)
    losses = np.asarray(result.epoch_losses)
    smoothed = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smoothed) <= 1e-5)


def test_provenance_guard_rejects_test_frames():
    split = split_dataset(make_subjects(4, 12), small_cfg(validation_size=5))
    model = build_model("dl", TINY, seed=8)
    with pytest.raises(ProvenanceError, match="gradient step|validation"):
        train(model, split.test, split.val, small_cfg(validation_size=5),
              forbidden_subject_ids=set(split.test_subject_ids))


def test_divergence_reports_batch_index():
    split = split_dataset(make_subjects(4, 12), small_cfg(validation_size=5))
    model = build_model("dl", TINY, seed=9)
    with pytest.raises(DivergenceError, match="batch index"), np.errstate(over="ignore"):
        train(model, split.train, split.val,
              small_cfg(validation_size=5, learning_rate=1e6, epochs=8))
