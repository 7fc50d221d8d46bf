"""Session-level recurrent head over clip features, endpoint-only loss.

The state is zero before clip 1 and threads clip by clip; only clips 1 and K
are scored.  Binary mode has one logit, gifs = sigmoid(logit).  Three-class
mode has three logits and gifs is the normalized expected class.
"""

from dataclasses import dataclass, asdict, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import label_class, n_classes

PREFIX = "rnn."
CELLS = ("rnn", "gru")
LOSSES = ("l1", "ce")


class HeadError(ValueError):
    pass


@dataclass(frozen=True)
class HeadConfig:
    feature_dim: int = 64
    hidden: int = 32
    cell: str = "rnn"
    mode: str = "binary"
    loss: str = "l1"
    ablate_recurrence: bool = False

    def __post_init__(self):
        if self.feature_dim < 1 or self.hidden < 1:
            raise HeadError("feature_dim and hidden must be positive")
        if self.cell not in CELLS:
            raise HeadError(f"cell must be one of {CELLS}, got {self.cell!r}")
        if self.loss not in LOSSES:
            raise HeadError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.loss == "ce" and self.mode == "binary":
            raise HeadError("cross-entropy loss is only defined for three-class mode")
        if self.ablate_recurrence and self.cell != "rnn":
            raise HeadError("recurrence ablation is defined for the tanh cell only")
        n_classes(self.mode)

    @property
    def n_out(self):
        return 1 if self.mode == "binary" else n_classes(self.mode)

    def asdict(self):
        return asdict(self)


def init_params(cfg, gen):
    s, h = cfg.feature_dim, cfg.hidden
    p = {}
    gates = ("",) if cfg.cell == "rnn" else ("_z", "_r", "_n")
    for g in gates:
        p[f"wx{g}"] = gen.normal(0.0, 1.0 / np.sqrt(s), (s, h))
        p[f"wh{g}"] = gen.normal(0.0, 1.0 / np.sqrt(h), (h, h))
        p[f"b{g}"] = np.zeros(h)
    p["wo"] = gen.normal(0.0, 1.0 / np.sqrt(h), (h, cfg.n_out))
    p["bo"] = np.zeros(cfg.n_out)
    out = {PREFIX + k: Tensor(v, requires_grad=True) for k, v in p.items()}
    if cfg.ablate_recurrence:
        ablate(out)
    return out


def ablate(params):
    """Freeze the recurrent weight at zero: each clip is then scored on its own."""
    wh = params[PREFIX + "wh"]
    params[PREFIX + "wh"] = Tensor(np.zeros(wh.shape), requires_grad=False)
    return params


def zero_state(cfg):
    return Tensor(np.zeros(cfg.hidden))


def _check(feature, prev, params, cfg):
    if feature.shape != (cfg.feature_dim,):
        raise HeadError(f"step: feature shape {feature.shape}, expected ({cfg.feature_dim},)")
    if prev.shape != (cfg.hidden,):
        raise HeadError(f"step: state shape {prev.shape}, expected ({cfg.hidden},)")
    wx = params[PREFIX + ("wx" if cfg.cell == "rnn" else "wx_z")]
    if wx.shape != (cfg.feature_dim, cfg.hidden):
        raise HeadError(f"step: input weight shape {wx.shape} does not match config")


def _cell(x, h, params, cfg):
    P = PREFIX
    if cfg.cell == "rnn":
        return ad.tanh(x @ params[P + "wx"] + h @ params[P + "wh"] + params[P + "b"])
    z = ad.sigmoid(x @ params[P + "wx_z"] + h @ params[P + "wh_z"] + params[P + "b_z"])
    r = ad.sigmoid(x @ params[P + "wx_r"] + h @ params[P + "wh_r"] + params[P + "b_r"])
    n = ad.tanh(x @ params[P + "wx_n"] + r * (h @ params[P + "wh_n"]) + params[P + "b_n"])
    return (1.0 - z) * n + z * h


def gifs_from_logits(logits, mode):
    """Scalar gifs Tensor and class-probability Tensor (None in binary mode)."""
    if mode == "binary":
        return ad.sigmoid(logits)[0], None
    probs = ad.softmax(logits)
    n = probs.shape[0]
    weights = np.arange(n, dtype=np.float64) / (n - 1)
    return (probs * weights).sum(), probs


def step(feature, prev, params, cfg):
    """One clip: (gifs Tensor, next state Tensor, logits Tensor)."""
    _check(feature, prev, params, cfg)
    nxt = _cell(feature, prev, params, cfg)
    logits = nxt @ params[PREFIX + "wo"] + params[PREFIX + "bo"]
    gifs, _ = gifs_from_logits(logits, cfg.mode)
    return gifs, nxt, logits


@dataclass
class GifsTrace:
    gifs: tuple
    states: tuple
    decisions: tuple
    logits: tuple = ()
    gifs_t: list = field(default_factory=list, repr=False)
    logits_t: list = field(default_factory=list, repr=False)

    @property
    def k(self):
        return len(self.gifs)

    def detached(self):
        """Copy without the autodiff tensors (and the graph they keep alive)."""
        return GifsTrace(self.gifs, self.states, self.decisions, self.logits)

    def hidden_norms(self):
        return tuple(float(np.linalg.norm(s)) for s in self.states)


def decide(gifs, logits, mode):
    if mode == "binary":
        return int(gifs >= 0.5)
    return int(np.argmax(logits))


def run_session(features, params, cfg):
    """Thread the state through clips 1..K; ``features`` is (K, S) or a list of (S,)."""
    if isinstance(features, Tensor):
        rows = [features[j] for j in range(features.shape[0])]
    else:
        rows = [f if isinstance(f, Tensor) else Tensor(f) for f in features]
    if len(rows) < 2:
        raise HeadError(f"a session needs at least 2 clips, got {len(rows)}")
    h = zero_state(cfg)
    gifs_t, logits_t, states = [], [], []
    for x in rows:
        g, h, lg = step(x, h, params, cfg)
        gifs_t.append(g)
        logits_t.append(lg)
        states.append(h.numpy().copy())
    gifs = tuple(g.item() for g in gifs_t)
    logits = tuple(lg.numpy().copy() for lg in logits_t)
    decisions = tuple(decide(g, lg, cfg.mode) for g, lg in zip(gifs, logits))
    return GifsTrace(gifs, tuple(states), decisions, logits, gifs_t, logits_t)


def session_loss(trace, pre, post, mode, loss="l1"):
    """Endpoint loss; middle clips never enter it."""
    first, last = 0, trace.k - 1
    y0, y1 = label_class(pre, mode), label_class(post, mode)
    if loss == "ce":
        if mode == "binary":
            raise HeadError("cross-entropy loss is only defined for three-class mode")
        total = None
        for j, y in ((first, y0), (last, y1)):
            term = -ad.log_softmax(trace.logits_t[j])[y]
            total = term if total is None else total + term
        return total
    scale = n_classes(mode) - 1
    return (ad.abs(trace.gifs_t[first] - y0 / scale)
            + ad.abs(trace.gifs_t[last] - y1 / scale))
