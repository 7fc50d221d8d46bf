import json
import math
import numpy as np
import pytest

from rvt import autodiff as ad
from rvt import data, training
from rvt.model import dataset_inputs
from rvt.training import TrainConfig, TrainingError


def cfg(**kw):
    base = dict(lr=1e-2, optimizer="adam", epochs=3, freeze_encoder=True, hidden=4)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def loocv_result(tiny_ds, tiny_enc):
    return training.run_loocv(tiny_ds, cfg(), tiny_enc)


def test_one_fold_per_participant_and_no_leakage(loocv_result, tiny_ds):
    assert [fr.participant_id for fr in loocv_result] == tiny_ds.participants()
    for fr in loocv_result:
        assert fr.participant_id not in fr.train_participants
        assert {r["participant_id"] for r in fr.predictions} == {fr.participant_id}
        assert set(fr.train_participants) | {fr.participant_id} == set(tiny_ds.participants())


def test_predictions_cover_endpoint_clips(loocv_result, tiny_ds):
    fr = loocv_result[0]
    sessions = [s for s in tiny_ds.sessions if s.participant_id == fr.participant_id]
    want = sorted((s.index, s.clips[j].index) for s in sessions for j in (0, s.n_clips - 1))
    assert sorted((r["session_index"], r["clip_index"]) for r in fr.predictions) == want
    for r in fr.predictions:
        assert 0.0 <= r["gifs"] <= 1.0 and r["decision"] == int(r["gifs"] >= 0.5)
    assert len(fr.traces) == len(sessions)


def test_loss_curve_is_finite(loocv_result):
    for fr in loocv_result:
        assert len(fr.loss_curve) == 3
        assert all(math.isfinite(v) and 0.0 <= v <= 2.0 for v in fr.loss_curve)


def test_same_seed_is_bitwise_reproducible(tiny_ds, tiny_enc, loocv_result):
    again = training.run_loocv(tiny_ds, cfg(), tiny_enc)
    a = json.dumps(training.aggregate(loocv_result, "binary"), sort_keys=True)
    b = json.dumps(training.aggregate(again, "binary"), sort_keys=True)
    assert a == b


def test_parallel_folds_match_serial(tiny_ds, tiny_enc, loocv_result):
    par = training.run_loocv(tiny_ds, cfg(), tiny_enc, jobs=2)
    for a, b in zip(loocv_result, par):
        assert a.participant_id == b.participant_id
        assert a.loss_curve == b.loss_curve
        assert a.predictions == b.predictions


def test_fold_subset_matches_full_run(tiny_ds, tiny_enc, loocv_result):
    only = training.run_loocv(tiny_ds, cfg(), tiny_enc, folds=[1])
    assert only[0].predictions == loocv_result[1].predictions


def test_training_lowers_loss(tiny_ds, tiny_enc):
    fold = data.loocv_folds(tiny_ds)[0]
    _, hist = training.train_one(fold.train, cfg(epochs=15, lr=3e-2), tiny_enc)
    assert hist[-1] < hist[0]


def test_unfrozen_sgd_path_runs(tiny_ds, tiny_enc):
    fold = data.loocv_folds(tiny_ds)[0]
    model, hist = training.train_one(fold.train, TrainConfig(lr=1e-3, epochs=1, hidden=4),
                                     tiny_enc)
    assert len(hist) == 1 and math.isfinite(hist[0])


@pytest.mark.parametrize("freeze", [True, False])
def test_ablation_keeps_recurrent_weight_zero(tiny_ds, tiny_enc, freeze):
    fold = data.loocv_folds(tiny_ds)[0]
    c = cfg(ablate_recurrence=True, freeze_encoder=freeze, epochs=2,
            optimizer="adam" if freeze else "sgd", lr=1e-2 if freeze else 1e-4)
    model, _ = training.train_one(fold.train, c, tiny_enc)
    assert np.all(model.params["rnn.wh"].data == 0.0)


def test_three_class_mode(tiny_ds, tiny_enc):
    res = training.run_loocv(tiny_ds, cfg(mode="three", epochs=2), tiny_enc, folds=[0])
    rows = res[0].predictions
    assert all(len(r["probs"]) == 3 and abs(sum(r["probs"]) - 1) < 1e-12 for r in rows)
    assert all(r["true"] in (0, 1, 2) for r in rows)


def test_precomputed_inputs_give_same_result(tiny_ds, tiny_enc, loocv_result):
    inputs = dataset_inputs(tiny_ds, tiny_enc)
    res = training.run_loocv(tiny_ds, cfg(), tiny_enc, inputs=inputs, folds=[0])
    assert res[0].predictions == loocv_result[0].predictions


def test_aggregate_report(loocv_result):
    rep = training.aggregate(loocv_result, "binary")
    assert rep["n_folds"] == 3 and len(rep["folds"]) == 3
    json.dumps(rep, allow_nan=False)
    for key in training.METRIC_KEYS:
        s = rep["across_folds"][key]
        vals = [f[key] for f in rep["folds"] if f[key] is not None]
        assert s["n_folds"] == len(vals)
        if vals:
            assert s["mean"] == pytest.approx(sum(vals) / len(vals))


def fake_report(values):
    return {"folds": [{"participant_id": f"P{i:02d}", "bacc": v} for i, v in enumerate(values)]}


def test_compare_pairs_by_participant():
    a = fake_report([0.9, 0.8, 0.95, 0.7, 0.85, 0.9])
    b = fake_report([0.5, 0.6, 0.55, 0.6, 0.5, None])
    out = training.compare(a, b)
    assert out["n_pairs"] == 5 and out["W"] == 15.0
    assert out["p"] == pytest.approx(2 / 32)


def test_compare_too_few_pairs_is_reported():
    out = training.compare(fake_report([0.5, 0.6]), fake_report([0.4, 0.6]))
    assert out["p"] is None and "note" in out


@pytest.mark.parametrize("bad", [dict(lr=0.0), dict(epochs=0), dict(clip_batch=2),
                                 dict(seed=-1), dict(optimizer="rmsprop"), dict(mode="five")])
def test_config_errors(bad):
    with pytest.raises((TrainingError, data.DataError)):
        TrainConfig(**bad)


def test_fold_failure_names_the_fold(tiny_ds, tiny_enc, monkeypatch):
    def boom(*a, **k):
        raise FloatingPointError("overflow")
    monkeypatch.setattr(training, "train_one", boom)
    with pytest.raises(TrainingError, match=r"fold 0 \(P01\) failed: overflow"):
        training.run_loocv(tiny_ds, cfg(), tiny_enc, folds=[0])


def test_divergence_is_detected(tiny_ds, tiny_enc, monkeypatch):
    real = training.recurrent.session_loss

    def nan_loss(*a, **k):
        return real(*a, **k) * float("nan")
    monkeypatch.setattr(training.recurrent, "session_loss", nan_loss)
    fold = data.loocv_folds(tiny_ds)[0]
    with pytest.raises(FloatingPointError):
        training.train_one(fold.train, cfg(), tiny_enc)
    # with op-level checks off the loop's own check still stops it
    prev = ad.set_check_finite(False)
    try:
        with pytest.raises(TrainingError, match="diverged"):
            training.train_one(fold.train, cfg(), tiny_enc)
    finally:
        ad.set_check_finite(prev)


def test_empty_training_set():
    with pytest.raises(TrainingError, match="empty"):
        training.train_one(data.Dataset((), "binary", {}), cfg())
