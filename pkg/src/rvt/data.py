"""Sessions, clips, fatigue labels, frame sampling and the synthetic generator.

Frames are never held for a whole dataset at once.  Each :class:`Clip`
carries a frame *source*, a zero-argument callable returning a float64
array of shape ``(T, H, W)`` (grayscale face crops, values in [0, 1]).
Synthetic clips render deterministically on every call; clips loaded from
disk read their file on every call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import rng as rngmod

BINARY_CUTOFF = 2.0
THREE_CLASS_CUTS = (2.0, 5.0)
LABEL_MIN, LABEL_MAX = 0.0, 10.0


class DataError(ValueError):
    pass


# --------------------------------------------------------------------------
# labels
# --------------------------------------------------------------------------

def check_label(value):
    v = float(value)
    if not (LABEL_MIN <= v <= LABEL_MAX):
        raise DataError(f"fatigue label {v} outside [{LABEL_MIN}, {LABEL_MAX}]")
    return v


def binarize(value, cutoff=BINARY_CUTOFF):
    """0 if value < cutoff else 1."""
    return 0 if float(value) < cutoff else 1


def three_class(value):
    """0 if v < 2, 1 if 2 <= v < 5, else 2."""
    v = float(value)
    if v < THREE_CLASS_CUTS[0]:
        return 0
    if v < THREE_CLASS_CUTS[1]:
        return 1
    return 2


def label_class(value, mode):
    if mode == "binary":
        return binarize(value)
    if mode == "three":
        return three_class(value)
    raise DataError(f"unknown class mode {mode!r}")


def n_classes(mode):
    if mode not in ("binary", "three"):
        raise DataError(f"mode must be 'binary' or 'three', got {mode!r}")
    return 2 if mode == "binary" else 3


# --------------------------------------------------------------------------
# frame sampling
# --------------------------------------------------------------------------

def sample_indices(n_frames, fps, period_s=5.0, clip_len=16):
    """Frame indices of each clip: one frame every ``period_s`` seconds.

    Returns an int array of shape (n_clips, clip_len).  Clips are
    non-overlapping ``clip_len * period_s`` second windows; a trailing
    window shorter than that is dropped.
    """
    if fps <= 0:
        raise DataError(f"fps must be positive, got {fps}")
    if period_s <= 0 or clip_len < 1:
        raise DataError("period_s must be positive and clip_len >= 1")
    if fps * period_s < 1.0:
        raise DataError(f"sampling every {period_s:g} s needs at least one frame per period; "
                        f"fps {fps:g} is too low")
    duration = n_frames / fps
    window = clip_len * period_s
    if duration < window:
        raise DataError(
            f"input lasts {duration:g} s but one clip needs {window:g} s "
            f"({clip_len} frames every {period_s:g} s)")
    n_clips = int(math.floor(duration / window + 1e-9))
    times = np.arange(n_clips * clip_len) * period_s
    idx = np.minimum(np.rint(times * fps).astype(np.int64), n_frames - 1)
    return idx.reshape(n_clips, clip_len)


def sample_frames(raw, fps, period_s=5.0, clip_len=16):
    """Cut a frame sequence (n_frames, ...) into clips of ``clip_len`` sampled frames.

    Returns a list of arrays, each (clip_len, ...), in temporal order.
    """
    raw = np.asarray(raw)
    idx = sample_indices(len(raw), fps, period_s, clip_len)
    return [np.ascontiguousarray(raw[row], dtype=np.float64) for row in idx]


# --------------------------------------------------------------------------
# data model
# --------------------------------------------------------------------------

class ArrayFrames:
    def __init__(self, frames):
        self._frames = np.ascontiguousarray(frames, dtype=np.float64)
        self._frames.setflags(write=False)

    def __call__(self):
        return self._frames


@dataclass(frozen=True, eq=False)
class Clip:
    index: int
    is_labeled: bool
    label: Optional[float]
    mask: bool
    source: Callable[[], np.ndarray] = field(repr=False)
    latent: Optional[float] = None

    @property
    def frames(self):
        return self.source()


@dataclass(frozen=True, eq=False)
class Session:
    participant_id: str
    index: int
    clips: tuple
    pre: float
    post: float
    reaction_time: Optional[float] = None
    landmarks: Optional[tuple] = None

    def __post_init__(self):
        check_label(self.pre)
        check_label(self.post)
        k = len(self.clips)
        if k < 2:
            raise DataError(f"session {self.key} has {k} clips; need at least 2")
        if self.index < 1:
            raise DataError(f"session index must be positive, got {self.index}")
        for j, clip in enumerate(self.clips, start=1):
            if clip.index != j:
                raise DataError(f"session {self.key}: clip {j} carries index {clip.index}")
            endpoint = j in (1, k)
            if clip.is_labeled != endpoint or (clip.label is not None) != endpoint:
                raise DataError(f"session {self.key}: clip {j} labeled flag inconsistent")
        if self.clips[0].label != self.pre or self.clips[-1].label != self.post:
            raise DataError(f"session {self.key}: endpoint labels differ from pre/post")
        if self.reaction_time is not None and not self.reaction_time > 0:
            raise DataError(f"session {self.key}: reaction time must be positive")

    @property
    def key(self):
        return (self.participant_id, self.index)

    @property
    def n_clips(self):
        return len(self.clips)

    @property
    def mask_flags(self):
        return tuple(c.mask for c in self.clips)

    @property
    def l_mean(self):
        return 0.5 * (self.pre + self.post)


def make_session(participant_id, index, clip_sources, pre, post, mask_flags=None,
                 reaction_time=None, landmarks=None, latents=None):
    """Build a Session from per-clip frame sources; labels go on clips 1 and K."""
    k = len(clip_sources)
    mask_flags = mask_flags or [False] * k
    clips = []
    for j, src in enumerate(clip_sources, start=1):
        if isinstance(src, np.ndarray):
            src = ArrayFrames(src)
        label = pre if j == 1 else post if j == k else None
        clips.append(Clip(j, j in (1, k), label, bool(mask_flags[j - 1]), src,
                          None if latents is None else float(latents[j - 1])))
    return Session(participant_id, int(index), tuple(clips), float(pre), float(post),
                   reaction_time, landmarks)


@dataclass(frozen=True, eq=False)
class Dataset:
    sessions: tuple
    class_mode: str = "binary"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n_classes(self.class_mode)
        seen = set()
        for s in self.sessions:
            if s.key in seen:
                raise DataError(f"duplicate session {s.key}")
            seen.add(s.key)

    def participants(self):
        return sorted({s.participant_id for s in self.sessions})

    def labeled(self):
        """The labeled set: endpoint clips of every session."""
        return [(s, c) for s in self.sessions for c in s.clips if c.is_labeled]

    def unlabeled(self):
        return [(s, c) for s in self.sessions for c in s.clips if not c.is_labeled]

    def subset(self, participant_ids):
        keep = set(participant_ids)
        return Dataset(tuple(s for s in self.sessions if s.participant_id in keep),
                       self.class_mode, self.meta)

    def with_mode(self, mode):
        return Dataset(self.sessions, mode, self.meta)


class Fold(NamedTuple):
    train: Dataset
    test: Dataset

    @property
    def participant_id(self):
        return self.test.participants()[0]


def loocv_folds(ds):
    """One fold per participant; the test side holds every session of that participant."""
    pids = ds.participants()
    if len(pids) < 2:
        raise DataError(f"leave-one-participant-out needs >= 2 participants, got {len(pids)}")
    return [Fold(ds.subset([p for p in pids if p != pid]), ds.subset([pid])) for pid in pids]


# --------------------------------------------------------------------------
# synthetic generator
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_participants: int = 24
    sessions_per_participant: int = 5
    clips_per_session: int = 8
    frames_per_clip: int = 16
    image_size: int = 112
    mask_prob: float = 0.3
    noise_sigma: float = 0.02
    eye_base: float = 0.8
    eye_slope: float = 0.05
    eye_base_jitter: float = 0.0
    pre_max: float = 4.0
    drift_max: float = 6.0
    excursion: float = 0.0
    rt_missing_prob: float = 0.0

    def validate(self):
        if self.n_participants < 2:
            raise DataError("n_participants must be >= 2")
        if self.sessions_per_participant < 1:
            raise DataError("sessions_per_participant must be >= 1")
        if self.clips_per_session < 3:
            raise DataError("clips_per_session must be >= 3")
        if self.frames_per_clip < 1:
            raise DataError("frames_per_clip must be >= 1")
        if self.image_size < 12:
            raise DataError("image_size must be >= 12")
        if not 0.0 <= self.mask_prob <= 1.0 or not 0.0 <= self.rt_missing_prob <= 1.0:
            raise DataError("probabilities must lie in [0, 1]")
        if self.noise_sigma < 0 or self.eye_slope <= 0 or self.excursion < 0:
            raise DataError("noise_sigma and excursion must be >= 0, eye_slope > 0")
        if self.eye_base_jitter < 0 or self.pre_max < 0 or self.drift_max < 0:
            raise DataError("jitter and label ranges must be >= 0")
        lo = self.eye_base - self.eye_base_jitter - self.eye_slope * LABEL_MAX - 0.25
        hi = self.eye_base + self.eye_base_jitter
        if lo < 0.0 or hi > 1.0:
            raise DataError("eye intensity range leaves [0, 1]; reduce eye_base/eye_slope")
        return self

    def asdict(self):
        return asdict(self)


# Template geometry as fractions of the crop (rows of H, columns of W = H - 1).
EYE_ROWS = (0.3125, 0.4375)
MOUTH_ROW0 = 2.0 / 3.0
FACE_CENTER = (0.5, 0.5)
FACE_RADII = (0.47, 0.43)
BACKGROUND = 0.15
MASK_VALUE = 0.92

LANDMARK_NAMES = (
    "left_eye_outer", "left_pupil", "left_eye_inner",
    "right_eye_inner", "right_pupil", "right_eye_outer",
    "left_brow", "right_brow", "nose_tip",
    "mouth_left", "mouth_top", "mouth_right", "mouth_bottom", "chin",
)
LANDMARK_REGIONS = {
    "eye": (0, 1, 2, 3, 4, 5),
    "mouth": (9, 10, 11, 12),
}
_LANDMARK_TEMPLATE = (  # (row, col) fractions
    (0.375, 0.20), (0.375, 0.31), (0.375, 0.42),
    (0.375, 0.58), (0.375, 0.69), (0.375, 0.80),
    (0.27, 0.31), (0.27, 0.69), (0.57, 0.50),
    (0.77, 0.36), (0.73, 0.50), (0.77, 0.64), (0.81, 0.50), (0.92, 0.50),
)


def eye_band_rows(size):
    return int(round(EYE_ROWS[0] * size)), int(round(EYE_ROWS[1] * size))


def mouth_row0(size):
    return int(math.floor(MOUTH_ROW0 * size))


def face_mask(size):
    h, w = size, size - 1
    rr, cc = np.mgrid[0:h, 0:w]
    cy, cx = FACE_CENTER[0] * (h - 1), FACE_CENTER[1] * (w - 1)
    ry, rx = FACE_RADII[0] * h, FACE_RADII[1] * w
    return ((rr - cy) / ry) ** 2 + ((cc - cx) / rx) ** 2 <= 1.0


def eye_region(size):
    """Boolean (H, W) mask of eye-band pixels inside the face."""
    r0, r1 = eye_band_rows(size)
    band = np.zeros((size, size - 1), dtype=bool)
    band[r0:r1] = True
    return band & face_mask(size)


def eye_band_mask(size, width=None):
    """Boolean mask of the whole eye row band, (H, width or H - 1)."""
    r0, r1 = eye_band_rows(size)
    band = np.zeros((size, size - 1 if width is None else width), dtype=bool)
    band[r0:r1] = True
    return band


class _Face:
    """Per-participant appearance."""

    def __init__(self, cfg, gen):
        s = cfg.image_size
        self.skin = float(gen.uniform(0.55, 0.70))
        self.eye_base = cfg.eye_base + float(gen.uniform(-1.0, 1.0)) * cfg.eye_base_jitter
        shift = gen.integers(-1, 2, size=2)  # (row, col) in pixels
        r0, r1 = eye_band_rows(s)
        pts = []
        for name, (fr, fc) in zip(LANDMARK_NAMES, _LANDMARK_TEMPLATE):
            r = int(round(fr * s)) + int(shift[0])
            c = int(round(fc * (s - 1))) + int(shift[1])
            if name.endswith(("outer", "inner", "pupil")):
                r = min(max(r, r0 + 1), r1 - 2)
            pts.append((c, r))
        self.landmarks = tuple(pts)


def _render_clip(cfg, face, latent, mask, gen):
    t, s = cfg.frames_per_clip, cfg.image_size
    h, w = s, s - 1
    fm = face_mask(s)
    base = np.where(fm, face.skin, BACKGROUND)
    r0, r1 = eye_band_rows(s)
    eye = face.eye_base - cfg.eye_slope * latent
    base[r0:r1] = np.where(fm[r0:r1], eye, base[r0:r1])
    rr, cc = np.mgrid[0:h, 0:w]
    pr = max(1.0, 0.035 * s)
    for idx in (1, 4):
        pc, prow = face.landmarks[idx]
        pupil = (rr - prow) ** 2 + (cc - pc) ** 2 <= pr * pr
        base[pupil] = eye - 0.25
    for idx in (6, 7):
        bc, br = face.landmarks[idx]
        brow = (np.abs(rr - br) <= max(1, s // 56)) & (np.abs(cc - bc) <= 0.1 * w) & (rr < r0)
        base[brow] = 0.3
    nc, nr = face.landmarks[8]
    nose = (np.abs(cc - nc) <= max(1, s // 112)) & (rr >= r1 + 2) & (rr <= nr)
    base[nose] = face.skin - 0.1

    m0 = mouth_row0(s)
    mc, mr = face.landmarks[10][0], 0.5 * (face.landmarks[10][1] + face.landmarks[12][1])
    mouth_rx = 0.14 * w
    openings = gen.uniform(0.01, 0.05, size=t) * s
    frames = np.empty((t, h, w))
    for k in range(t):
        f = base.copy()
        mouth = ((rr - mr) / openings[k]) ** 2 + ((cc - mc) / mouth_rx) ** 2 <= 1.0
        f[mouth] = 0.2
        frames[k] = f
    if cfg.noise_sigma > 0:
        frames += gen.normal(0.0, cfg.noise_sigma, size=frames.shape)
        np.clip(frames, 0.0, 1.0, out=frames)
    if mask:
        frames[:, m0:, :] = MASK_VALUE
    return frames


class RenderedFrames:
    """Deterministic synthetic frame source for one clip."""

    def __init__(self, cfg, face, latent, mask, seed, label):
        self.cfg = cfg
        self.face = face
        self.latent = latent
        self.mask = mask
        self.seed = seed
        self.label = label

    def __call__(self):
        gen = rngmod.stream(self.seed, self.label)
        return _render_clip(self.cfg, self.face, self.latent, self.mask, gen)


def latent_trajectory(pre, post, k, excursion):
    """Linear pre->post ramp plus ``excursion * sin(pi t)``, clamped to [0, 10]."""
    t = np.linspace(0.0, 1.0, k)
    lat = pre + t * (post - pre) + excursion * np.sin(np.pi * t)
    lat[0], lat[-1] = pre, post
    return np.clip(lat, LABEL_MIN, LABEL_MAX)


def generate_synthetic(cfg=None, seed=0, class_mode="binary"):
    """Synthetic stand-in for the clinical dataset; identical (cfg, seed) give identical data."""
    cfg = (cfg or SynthConfig()).validate()
    width = max(2, len(str(cfg.n_participants)))
    sessions = []
    for p in range(1, cfg.n_participants + 1):
        pid = f"P{p:0{width}d}"
        face = _Face(cfg, rngmod.stream(seed, f"synth/face/{pid}"))
        for i in range(1, cfg.sessions_per_participant + 1):
            g = rngmod.stream(seed, f"synth/session/{pid}/{i}")
            pre = float(g.uniform(0.0, cfg.pre_max))
            post = float(min(LABEL_MAX, max(LABEL_MIN, pre + g.uniform(0.0, cfg.drift_max))))
            exc = float(g.uniform(-cfg.excursion, cfg.excursion))
            masked = bool(g.random() < cfg.mask_prob)
            rt_noise = float(g.normal(0.0, 0.02))
            missing = bool(g.random() < cfg.rt_missing_prob)
            lat = latent_trajectory(pre, post, cfg.clips_per_session, exc)
            rt = 0.8 + 0.05 * float(lat.mean()) - 0.03 * (i - 1) + rt_noise
            rt = None if missing else max(rt, 1e-3)
            sources = [RenderedFrames(cfg, face, float(lat[j]), masked, seed,
                                      f"synth/frames/{pid}/{i}/{j + 1}")
                       for j in range(cfg.clips_per_session)]
            sessions.append(make_session(pid, i, sources, pre, post,
                                         [masked] * cfg.clips_per_session, rt,
                                         face.landmarks, lat))
    meta = {
        "synth": cfg.asdict(),
        "seed": int(seed),
        "image_size": cfg.image_size,
        "eye_rows": list(eye_band_rows(cfg.image_size)),
        "landmark_names": list(LANDMARK_NAMES),
        "landmark_regions": {k: list(v) for k, v in LANDMARK_REGIONS.items()},
    }
    return Dataset(tuple(sessions), class_mode, meta)
