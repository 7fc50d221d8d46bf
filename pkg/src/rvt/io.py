"""On-disk dataset layout: JSON manifest plus per-clip frame files (PGM or f64 blobs)."""

import json
import os

import numpy as np

from . import checkpoint
from .data import DataError, Dataset, make_session

MANIFEST = "manifest.json"
FORMATS = ("pgm", "f64")
MANIFEST_VERSION = 1


# --------------------------------------------------------------------------
# netpbm
# --------------------------------------------------------------------------

def encode_pgm(frames):
    """8-bit binary graymap; a (T, H, W) stack becomes T concatenated images."""
    a = np.asarray(frames)
    if a.ndim == 2:
        a = a[None]
    if a.dtype != np.uint8:
        a = to_u8(a)
    t, h, w = a.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    return b"".join(header + a[k].tobytes() for k in range(t))


def to_u8(values):
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _token(buf, pos):
    """Next whitespace-delimited header token, skipping # comments."""
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise DataError("truncated netpbm header")
    return buf[start:pos], pos


def _decode_netpbm(buf, magic, channels):
    images = []
    pos = 0
    while pos < len(buf) and buf[pos:].strip():
        tok, pos = _token(buf, pos)
        if tok != magic:
            raise DataError(f"expected {magic.decode()} image, found {tok[:8]!r}")
        w, pos = _token(buf, pos)
        h, pos = _token(buf, pos)
        mx, pos = _token(buf, pos)
        w, h, mx = int(w), int(h), int(mx)
        if mx != 255:
            raise DataError(f"only 8-bit netpbm is supported, maxval {mx}")
        pos += 1  # single whitespace byte before the raster
        size = w * h * channels
        if pos + size > len(buf):
            raise DataError("truncated netpbm raster")
        img = np.frombuffer(buf, np.uint8, size, pos).reshape((h, w, channels) if channels > 1
                                                             else (h, w))
        images.append(img)
        pos += size
    if not images:
        raise DataError("no image in file")
    return np.stack(images)


def decode_pgm(buf):
    """All images of a P5 file as a (T, H, W) uint8 array."""
    return _decode_netpbm(bytes(buf), b"P5", 1)


def encode_ppm(rgb):
    a = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = a.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + a.tobytes()


def decode_ppm(buf):
    return _decode_netpbm(bytes(buf), b"P6", 3)[0]


def write_bytes(path, data):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(data)


def read_frames(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] == checkpoint.MAGIC:
        arrays = checkpoint.loads(buf)
        if "frames" not in arrays:
            raise DataError(f"{path}: blob has no 'frames' entry")
        return arrays["frames"]
    return decode_pgm(buf).astype(np.float64) / 255.0


def write_frames(path, frames, fmt):
    if fmt == "pgm":
        write_bytes(path, encode_pgm(frames))
    elif fmt == "f64":
        write_bytes(path, checkpoint.dumps({"frames": np.asarray(frames, dtype=np.float64)}))
    else:
        raise DataError(f"frame format must be one of {FORMATS}, got {fmt!r}")


class FileFrames:
    """Lazy frame source backed by one file per clip."""

    def __init__(self, path):
        self.path = path

    def __call__(self):
        return read_frames(self.path)


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------

def dumps_json(obj):
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def write_dataset(ds, directory, fmt="pgm"):
    """Write frames and the manifest; returns the manifest path."""
    if fmt not in FORMATS:
        raise DataError(f"frame format must be one of {FORMATS}, got {fmt!r}")
    ext = "pgm" if fmt == "pgm" else "f64"
    entries = []
    for s in ds.sessions:
        refs = []
        for c in s.clips:
            rel = f"frames/{s.participant_id}/s{s.index:02d}/c{c.index:03d}.{ext}"
            write_frames(os.path.join(directory, rel), c.frames, fmt)
            refs.append(rel)
        entries.append({
            "participant_id": s.participant_id,
            "session_index": s.index,
            "pre": s.pre,
            "post": s.post,
            "reaction_time": s.reaction_time,
            "mask_flags": [bool(m) for m in s.mask_flags],
            "landmarks": [list(map(int, p)) for p in s.landmarks] if s.landmarks else None,
            "latents": [c.latent for c in s.clips] if s.clips[0].latent is not None else None,
            "frames": refs,
        })
    manifest = {"version": MANIFEST_VERSION, "frame_format": fmt, "meta": ds.meta,
                "sessions": entries}
    path = os.path.join(directory, MANIFEST)
    write_bytes(path, dumps_json(manifest).encode("utf-8"))
    return path


def manifest_path(path):
    return os.path.join(path, MANIFEST) if os.path.isdir(path) else path


def read_manifest(path):
    path = manifest_path(path)
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"no manifest at {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest version {manifest.get('version')!r}")
    return manifest


def load_dataset(path, class_mode="binary", check_files=True):
    """Dataset with lazy file-backed clips from a manifest file or its directory."""
    mpath = manifest_path(path)
    root = os.path.dirname(os.path.abspath(mpath))
    manifest = read_manifest(mpath)
    sessions = []
    for e in manifest["sessions"]:
        files = [os.path.join(root, f) for f in e["frames"]]
        if check_files:
            missing = [f for f in files if not os.path.isfile(f)]
            if missing:
                raise DataError(f"session {e['participant_id']}/{e['session_index']}: "
                                f"missing frame file {missing[0]}")
        if len(e["mask_flags"]) != len(files):
            raise DataError(f"session {e['participant_id']}/{e['session_index']}: "
                            f"{len(e['mask_flags'])} mask flags for {len(files)} clips")
        lm = tuple(tuple(p) for p in e["landmarks"]) if e.get("landmarks") else None
        sessions.append(make_session(e["participant_id"], e["session_index"],
                                     [FileFrames(f) for f in files], e["pre"], e["post"],
                                     e["mask_flags"], e["reaction_time"], lm, e.get("latents")))
    return Dataset(tuple(sessions), class_mode, manifest.get("meta", {}))
