"""Input-gradient saliency maps and landmark-neighbourhood aggregation."""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import encoder, recurrent
from .autodiff import Tensor

log = logging.getLogger(__name__)

TARGETS = ("gifs", "class")
METHODS = ("grad", "grad_x_input")


@dataclass
class SaliencyMap:
    values: np.ndarray  # (H, W) in [0, 1]
    clip_id: tuple = ()
    target: str = "gifs"
    degenerate: bool = False
    per_frame: np.ndarray = field(default=None, repr=False)

    @property
    def shape(self):
        return self.values.shape


@dataclass
class LandmarkReport:
    values: dict  # landmark id -> value in [0, 1]
    coords: dict  # landmark id -> (x, y) of the first map, after clamping
    n_maps: int
    clamped: int = 0

    def ranked(self):
        return sorted(self.values, key=lambda k: (-self.values[k], k))


def normalize(raw):
    """Min-max to [0, 1]; a constant map becomes all zeros and is flagged."""
    lo, hi = float(raw.min()), float(raw.max())
    if not hi > lo:
        return np.zeros_like(raw), True
    return (raw - lo) / (hi - lo), False


def input_gradient(composed, model, target="gifs", prev_state=None, method="grad"):
    """|d target / d pixel| for one composed clip (T, C, H, W), shape (T, H, W).

    The recurrent state entering the clip is a constant (zero by default), so
    the map attributes only this clip's pixels.
    """
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}, got {target!r}")
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    x = Tensor(np.asarray(composed, dtype=np.float64)[None], requires_grad=True)
    feat = encoder.encode_composed(x, model.params, model.enc)[0]
    h = Tensor(prev_state) if prev_state is not None else recurrent.zero_state(model.head)
    gifs, _, logits = recurrent.step(feat, h, model.params, model.head)
    if target == "gifs":
        out = gifs
    else:
        lg = logits.numpy()
        out = logits[0] if lg.shape[0] == 1 else logits[int(np.argmax(lg))]
    ad.backward(out)
    g = x.grad[0]
    if method == "grad_x_input":
        g = g * x.data[0]
    return np.abs(g).mean(axis=1)


def saliency(clip, model, target="gifs", prev_state=None, method="grad", clip_id=(),
             keep_frames=False):
    """Saliency of a PreprocessedClip: frame-averaged |gradient|, min-max normalized."""
    frames = input_gradient(clip.composed, model, target, prev_state, method)
    values, degenerate = normalize(frames.mean(axis=0))
    return SaliencyMap(values, tuple(clip_id), target, degenerate,
                       frames if keep_frames else None)


def window_mean(values, x, y, radius):
    h, w = values.shape
    return float(values[max(0, y - radius):min(h, y + radius + 1),
                        max(0, x - radius):min(w, x + radius + 1)].mean())


def aggregate_landmarks(maps, landmarks, radius_px=3):
    """Mean map value in an L-infinity window around each landmark, averaged over maps.

    ``landmarks`` is either one sequence of (x, y) used for every map or one
    sequence per map.  Ids are sequence positions.  Out-of-bounds points are
    clamped and counted.  The result is divided by its maximum.
    """
    maps = list(maps)
    if not maps:
        raise ValueError("no saliency maps to aggregate")
    if radius_px < 0:
        raise ValueError(f"radius must be non-negative, got {radius_px}")
    per_map = landmarks if _is_nested(landmarks) else [landmarks] * len(maps)
    if len(per_map) != len(maps):
        raise ValueError(f"{len(maps)} maps but {len(per_map)} landmark sets")
    n_ids = len(per_map[0])
    sums = np.zeros(n_ids)
    coords = {}
    clamped = 0
    for m, pts in zip(maps, per_map):
        v = m.values if isinstance(m, SaliencyMap) else np.asarray(m, dtype=np.float64)
        h, w = v.shape
        for i, (x, y) in enumerate(pts):
            cx, cy = min(max(int(x), 0), w - 1), min(max(int(y), 0), h - 1)
            if (cx, cy) != (int(x), int(y)):
                clamped += 1
            coords.setdefault(i, (cx, cy))
            sums[i] += window_mean(v, cx, cy, radius_px)
    vals = sums / len(maps)
    top = vals.max()
    if top > 0:
        vals = vals / top
    if clamped:
        log.warning("%d landmark coordinates were outside the map and got clamped", clamped)
    return LandmarkReport({i: float(vals[i]) for i in range(n_ids)}, coords, len(maps), clamped)


def _is_nested(landmarks):
    first = landmarks[0]
    return len(first) > 0 and hasattr(first[0], "__len__")


def top_fraction_inside(values, region, quantile=0.9):
    """Share of the saliency mass of the top (1 - quantile) pixels that lies in ``region``."""
    v = np.asarray(values, dtype=np.float64)
    thr = np.quantile(v, quantile)
    top = v >= thr
    mass = float(v[top].sum())
    if mass <= 0:
        return 0.0
    return float(v[top & region].sum()) / mass


def region_mean(report, ids):
    return float(np.mean([report.values[i] for i in ids]))


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

def heatmap_u8(values):
    return np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)


def overlay_rgb(values, background, alpha=0.5):
    """Blend a red-yellow heat colouring of ``values`` onto a grayscale background."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    bg = np.clip(np.asarray(background, dtype=np.float64), 0.0, 1.0)
    heat = np.stack([np.minimum(1.0, 2.0 * v), np.clip(2.0 * v - 1.0, 0.0, 1.0),
                     np.zeros_like(v)], axis=-1)
    base = np.repeat(bg[..., None], 3, axis=-1)
    a = alpha * v[..., None]
    return np.clip(np.rint(((1.0 - a) * base + a * heat) * 255.0), 0, 255).astype(np.uint8)
