import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rvt import data
from rvt.data import DataError, SynthConfig, binarize, three_class


def grid():
    return [round(0.01 * i, 2) for i in range(1001)]


def test_binarize_on_grid():
    for v in grid():
        assert binarize(v) == (0 if v < 2.0 else 1), v


def test_three_class_on_grid():
    for v in grid():
        want = 0 if v < 2.0 else 1 if v < 5.0 else 2
        assert three_class(v) == want, v


def test_cutoffs_are_inclusive_above():
    assert binarize(2.0) == 1 and binarize(1.99) == 0
    assert three_class(2.0) == 1 and three_class(5.0) == 2 and three_class(4.99) == 1


@given(st.floats(0, 10))
def test_class_zero_agrees(v):
    assert (three_class(v) == 0) == (binarize(v) == 0)


def test_labels_outside_range_rejected():
    with pytest.raises(DataError):
        data.check_label(10.5)
    with pytest.raises(DataError):
        data.make_session("P1", 1, [np.zeros((1, 3, 2))] * 2, -0.1, 3.0)


@given(st.integers(1, 5000), st.floats(0.5, 60.0))
def test_sample_frames_is_ordered_subsequence(n, fps):
    raw = np.arange(n, dtype=np.float64)
    try:
        clips = data.sample_frames(raw, fps, period_s=1.0, clip_len=4)
    except DataError as exc:
        assert "needs" in str(exc)
        assert n / fps < 4.0 or fps < 1.0
        return
    flat = np.concatenate(clips)
    assert np.all(np.diff(flat) > 0)
    assert set(flat) <= set(raw)
    assert all(len(c) == 4 for c in clips)
    # trailing partial windows are dropped, never padded
    assert len(clips) == int(np.floor(n / fps / 4.0 + 1e-9))


def test_sample_frames_one_every_period():
    idx = data.sample_indices(30 * 80 * 2 + 7, 30.0, 5.0, 16)
    assert idx.shape == (2, 16)
    assert idx[0, 1] - idx[0, 0] == 150 and idx[1, 0] == 16 * 150


def test_too_short_input_names_durations():
    with pytest.raises(DataError, match=r"lasts 2 s but one clip needs 80 s"):
        data.sample_indices(60, 30.0)


def test_partition_property(tiny_ds):
    total = sum(s.n_clips for s in tiny_ds.sessions)
    assert len(tiny_ds.labeled()) + len(tiny_ds.unlabeled()) == total
    for s in tiny_ds.sessions:
        labeled = [c for c in s.clips if c.is_labeled]
        assert [c.index for c in labeled] == [1, s.n_clips]
        assert labeled[0].label == s.pre and labeled[1].label == s.post


def test_session_validation():
    frames = [np.zeros((1, 3, 2))] * 3
    with pytest.raises(DataError, match="need at least 2"):
        data.make_session("P1", 1, frames[:1], 1.0, 2.0)
    with pytest.raises(DataError, match="positive"):
        data.make_session("P1", 0, frames, 1.0, 2.0)
    with pytest.raises(DataError, match="reaction time"):
        data.make_session("P1", 1, frames, 1.0, 2.0, reaction_time=-1.0)
    s = data.make_session("P1", 1, frames, 1.0, 3.0)
    assert s.l_mean == 2.0 and s.key == ("P1", 1)


def test_duplicate_sessions_rejected():
    s = data.make_session("P1", 1, [np.zeros((1, 3, 2))] * 2, 1.0, 2.0)
    with pytest.raises(DataError, match="duplicate"):
        data.Dataset((s, s))


def test_loocv_folds_hold_out_one_participant(tiny_ds):
    folds = data.loocv_folds(tiny_ds)
    assert [f.participant_id for f in folds] == tiny_ds.participants()
    for f in folds:
        assert f.test.participants() == [f.participant_id]
        assert f.participant_id not in f.train.participants()
        assert len(f.train.sessions) + len(f.test.sessions) == len(tiny_ds.sessions)
    with pytest.raises(DataError):
        data.loocv_folds(tiny_ds.subset(["P01"]))


def test_generator_is_deterministic(tiny_synth):
    a = data.generate_synthetic(tiny_synth, seed=3)
    b = data.generate_synthetic(tiny_synth, seed=3)
    c = data.generate_synthetic(tiny_synth, seed=4)
    fa = np.stack([cl.frames for s in a.sessions for cl in s.clips])
    fb = np.stack([cl.frames for s in b.sessions for cl in s.clips])
    fc = np.stack([cl.frames for s in c.sessions for cl in s.clips])
    assert fa.tobytes() == fb.tobytes()
    assert fa.tobytes() != fc.tobytes()
    assert [s.reaction_time for s in a.sessions] == [s.reaction_time for s in b.sessions]


def test_generator_label_distribution():
    cfg = SynthConfig(n_participants=30, sessions_per_participant=4, clips_per_session=3,
                      frames_per_clip=1, image_size=16)
    ds = data.generate_synthetic(cfg, seed=0)
    pre = np.array([s.pre for s in ds.sessions])
    post = np.array([s.post for s in ds.sessions])
    assert pre.min() >= 0 and pre.max() <= 4
    assert np.all(post >= pre) and np.all(post - pre <= 6) and post.max() <= 10


def test_latent_interpolates_linearly(tiny_synth):
    cfg = dataclasses.replace(tiny_synth, clips_per_session=6)
    for s in data.generate_synthetic(cfg, seed=1).sessions:
        lat = np.array([c.latent for c in s.clips])
        np.testing.assert_allclose(lat, np.linspace(s.pre, s.post, 6), atol=1e-12)


@pytest.mark.parametrize("size", [16, 56, 112])
def test_eye_band_intensity_is_affine_in_latent(size):
    cfg = SynthConfig(n_participants=2, sessions_per_participant=2, clips_per_session=5,
                      frames_per_clip=2, image_size=size, noise_sigma=0.0, mask_prob=0.0)
    region = data.eye_region(size)
    for s in data.generate_synthetic(cfg, seed=2).sessions:
        lat = np.array([c.latent for c in s.clips])
        means = np.array([c.frames[:, region].mean() for c in s.clips])
        # slope is exactly -eye_slope, so ordering follows latent fatigue
        np.testing.assert_allclose(np.diff(means), -cfg.eye_slope * np.diff(lat), atol=1e-12)
        assert list(np.argsort(-means, kind="stable")) == list(np.argsort(lat, kind="stable"))


def test_mask_overwrites_bottom_third():
    cfg = SynthConfig(n_participants=2, sessions_per_participant=3, clips_per_session=3,
                      frames_per_clip=2, image_size=24, mask_prob=1.0)
    s = data.generate_synthetic(cfg, seed=0).sessions[0]
    f = s.clips[1].frames
    assert all(s.mask_flags)
    assert np.all(f[:, data.mouth_row0(24):] == data.MASK_VALUE)


def test_reaction_time_model():
    cfg = SynthConfig(n_participants=3, sessions_per_participant=3, clips_per_session=3,
                      frames_per_clip=1, image_size=16)
    ds = data.generate_synthetic(cfg, seed=5)
    resid = [s.reaction_time - (0.8 + 0.05 * s.l_mean - 0.03 * (s.index - 1))
             for s in ds.sessions]
    assert np.std(resid) < 0.05 and abs(np.mean(resid)) < 0.03


def test_missing_reaction_times():
    cfg = SynthConfig(n_participants=4, sessions_per_participant=5, clips_per_session=3,
                      frames_per_clip=1, image_size=16, rt_missing_prob=0.5)
    rts = [s.reaction_time for s in data.generate_synthetic(cfg, seed=0).sessions]
    assert 0 < sum(r is None for r in rts) < len(rts)


def test_landmarks_sit_in_their_regions():
    ds = data.generate_synthetic(SynthConfig(n_participants=3, sessions_per_participant=1,
                                             clips_per_session=3, frames_per_clip=1), seed=0)
    r0, r1 = data.eye_band_rows(112)
    for s in ds.sessions:
        for i in data.LANDMARK_REGIONS["eye"]:
            assert r0 <= s.landmarks[i][1] < r1
        for i in data.LANDMARK_REGIONS["mouth"]:
            assert s.landmarks[i][1] >= data.mouth_row0(112)


@pytest.mark.parametrize("bad", [dict(n_participants=1), dict(clips_per_session=2),
                                 dict(noise_sigma=-1.0), dict(eye_slope=0.2),
                                 dict(mask_prob=1.5)])
def test_config_validation(bad):
    with pytest.raises(DataError):
        SynthConfig(**bad).validate()
