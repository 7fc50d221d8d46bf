"""Training loop, leave-one-participant-out driver and the aggregate report."""

import logging
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict, field, replace

import numpy as np

from . import data as datamod
from . import encoder, metrics, recurrent, rng
from .autodiff import Tensor, no_grad
from .encoder import EncoderConfig
from .model import Model, dataset_inputs, session_inputs
from .optim import Adam, SGD
from .recurrent import HeadConfig

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")
METRIC_KEYS = ("bacc", "accuracy", "f1", "precision", "auc")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-6
    epochs: int = 40
    clip_batch: int = 1
    seed: int = 0
    mode: str = "binary"
    freeze_encoder: bool = False
    optimizer: str = "sgd"
    ablate_recurrence: bool = False
    hidden: int = 32
    cell: str = "rnn"
    loss: str = "l1"
    calibrate: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise TrainingError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")
        if self.clip_batch != 1:
            raise TrainingError(f"clip_batch is fixed at 1, got {self.clip_batch}")
        if self.seed < 0:
            raise TrainingError(f"seed must be non-negative, got {self.seed}")
        if self.optimizer not in OPTIMIZERS:
            raise TrainingError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        datamod.n_classes(self.mode)

    def head_config(self, enc_cfg):
        return HeadConfig(feature_dim=enc_cfg.feature_dim, hidden=self.hidden, cell=self.cell,
                          mode=self.mode, loss=self.loss,
                          ablate_recurrence=self.ablate_recurrence)

    def asdict(self):
        return asdict(self)


# Settings for the synthetic benchmark: Adam on the head over a calibrated,
# frozen encoder; 112 -> 16 input pooling.
SYNTHETIC_TRAIN = dict(lr=1e-3, optimizer="adam", epochs=40, freeze_encoder=True)
SYNTHETIC_ENCODER = dict(input_pool=7)


@dataclass
class FoldResult:
    participant_id: str
    predictions: list  # dicts: session_index, clip_index, true, decision, gifs[, probs]
    loss_curve: list
    traces: dict = field(default_factory=dict)  # session key -> GifsTrace
    model: Model = None
    train_participants: tuple = ()


def _endpoints(x):
    return x[[0, x.shape[0] - 1]]


def train_one(train, cfg, enc_cfg=None, inputs=None, model=None):
    """Fit one model on ``train``; returns (model, per-epoch mean loss)."""
    if not train.sessions:
        raise TrainingError("training set is empty")
    enc_cfg = enc_cfg or EncoderConfig()
    if train.class_mode != cfg.mode:
        train = train.with_mode(cfg.mode)
    if inputs is None:
        inputs = {s.key: session_inputs(s, enc_cfg) for s in train.sessions}
    fresh = model is None
    model = model or Model.init(enc_cfg, cfg.head_config(enc_cfg), cfg.seed)
    vecs = None
    if cfg.calibrate and fresh:
        vecs = encoder.calibrate(model.params, enc_cfg, [inputs[s.key] for s in train.sessions])
    params = model.trainable(cfg.freeze_encoder)
    feats = {}
    if cfg.freeze_encoder:
        # the encoder is constant: encode every clip once
        with no_grad():
            for i, s in enumerate(train.sessions):
                v = vecs[i] if vecs is not None else encoder.frame_vectors(
                    inputs[s.key], model.params, enc_cfg)
                feats[s.key] = Tensor(encoder.clip_features(v, model.params, enc_cfg).numpy())
    opt = Adam(params, lr=cfg.lr) if cfg.optimizer == "adam" else SGD(params, cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for s in train.sessions:
            if cfg.freeze_encoder:
                f = feats[s.key]
                trace = recurrent.run_session(_endpoints(f) if cfg.ablate_recurrence else f,
                                              model.params, model.head)
            else:
                x = inputs[s.key]
                if cfg.ablate_recurrence:
                    # with the recurrent weight frozen at zero the endpoints see
                    # no context, so only they are encoded
                    x = _endpoints(x)
                trace = model.trace(x)
            loss = recurrent.session_loss(trace, s.pre, s.post, cfg.mode, cfg.loss)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"loss diverged ({value}) at epoch {epoch + 1}, "
                                    f"session {s.key}")
            loss.backward()
            for name, p in params.items():
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            opt.step()
            total += value
        history.append(total / len(train.sessions))
        log.debug("epoch %d mean loss %.6f", epoch + 1, history[-1])
    return model, history


def predict(model, ds, inputs=None):
    """Full traces for every session and predictions on the labeled clips."""
    traces, preds = {}, {}
    nc = datamod.n_classes(model.head.mode)
    for s in ds.sessions:
        x = inputs[s.key] if inputs is not None else session_inputs(s, model.enc)
        with no_grad():
            tr = model.trace(x).detached()
        traces[s.key] = tr
        for j in (0, s.n_clips - 1):
            clip = s.clips[j]
            row = {"participant_id": s.participant_id, "session_index": s.index,
                   "clip_index": clip.index,
                   "true": datamod.label_class(clip.label, model.head.mode),
                   "decision": tr.decisions[j], "gifs": tr.gifs[j]}
            if nc > 2:
                row["probs"] = [float(v) for v in _softmax(tr.logits[j])]
            preds[(s.key, clip.index)] = row
    return traces, [preds[k] for k in sorted(preds)]


def _softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def run_fold(ds, fold_index, cfg, enc_cfg, inputs=None):
    folds = datamod.loocv_folds(ds)
    fold = folds[fold_index]
    fcfg = replace(cfg, seed=rng.fold_seed(cfg.seed, fold_index))
    try:
        model, history = train_one(fold.train, fcfg, enc_cfg, inputs)
        traces, preds = predict(model, fold.test.with_mode(cfg.mode), inputs)
    except Exception as exc:
        raise TrainingError(f"fold {fold_index} ({fold.participant_id}) failed: {exc}") from exc
    return FoldResult(fold.participant_id, preds, history, traces, model,
                      tuple(fold.train.participants()))


_SHARED = {}


def _fold_worker(i):
    ds, cfg, enc_cfg, inputs = _SHARED["job"]
    return run_fold(ds, i, cfg, enc_cfg, inputs)


def run_loocv(ds, cfg, enc_cfg=None, jobs=1, inputs=None, folds=None):
    """Train and test one model per held-out participant; results in participant order."""
    enc_cfg = enc_cfg or EncoderConfig()
    ds = ds.with_mode(cfg.mode)
    n = len(datamod.loocv_folds(ds))
    idx = list(range(n)) if folds is None else list(folds)
    if inputs is None:
        inputs = dataset_inputs(ds, enc_cfg)
    if jobs <= 1 or len(idx) <= 1:
        return [run_fold(ds, i, cfg, enc_cfg, inputs) for i in idx]
    _SHARED["job"] = (ds, cfg, enc_cfg, inputs)
    try:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as ex:
            return list(ex.map(_fold_worker, idx))
    finally:
        _SHARED.pop("job", None)


# --------------------------------------------------------------------------
# aggregate report
# --------------------------------------------------------------------------

def _score_rows(rows, mode):
    nc = datamod.n_classes(mode)
    y = [r["true"] for r in rows]
    d = [r["decision"] for r in rows]
    g = [r["gifs"] for r in rows]
    prob = [r["probs"] for r in rows] if nc > 2 else None
    return metrics.summarize(y, d, g, nc, prob)


def _mean_sd(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None, 0
    mean = sum(vals) / len(vals)
    sd = math.sqrt(sum((v - mean) ** 2 for v in vals) / (len(vals) - 1)) if len(vals) > 1 else None
    return mean, sd, len(vals)


def _clean(x):
    if isinstance(x, float):
        return x if math.isfinite(x) else None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        return _clean(x.item())
    return x


def aggregate(results, mode):
    """Pooled metrics over all folds plus per-fold mean and sample SD."""
    per_fold = []
    pooled_rows = []
    for fr in results:
        m = _score_rows(fr.predictions, mode)
        m["participant_id"] = fr.participant_id
        m["final_loss"] = fr.loss_curve[-1] if fr.loss_curve else None
        per_fold.append(m)
        pooled_rows.extend(fr.predictions)
    across = {}
    for key in METRIC_KEYS:
        mean, sd, count = _mean_sd([m[key] for m in per_fold])
        across[key] = {"mean": mean, "sd": sd, "n_folds": count}
    report = {"mode": mode, "n_folds": len(results), "pooled": _score_rows(pooled_rows, mode),
              "across_folds": across, "folds": per_fold}
    return _clean(report)


def compare(report_a, report_b, key="bacc"):
    """Paired Wilcoxon over folds present and defined in both reports."""
    a = {f["participant_id"]: f[key] for f in report_a["folds"]}
    b = {f["participant_id"]: f[key] for f in report_b["folds"]}
    common = sorted(k for k in a if k in b and a[k] is not None and b[k] is not None)
    xa = [a[k] for k in common]
    xb = [b[k] for k in common]
    out = {"metric": key, "n_pairs": len(common),
           "mean_a": sum(xa) / len(xa) if xa else None,
           "mean_b": sum(xb) / len(xb) if xb else None}
    try:
        res = metrics.wilcoxon_signed_rank(xa, xb)
        out.update({"W": res.W, "p": res.p, "n_nonzero": res.n, "method": res.method})
    except metrics.MetricError as exc:
        out.update({"W": None, "p": None, "n_nonzero": 0, "method": None, "note": str(exc)})
    return _clean(out)
