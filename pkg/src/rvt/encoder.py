"""Clip encoder: conv blocks, spatial self-attention per frame, temporal self-attention.

Pipeline for a clip of T composed frames (T, C_in, H, W):

1. ``input_pool`` x ``input_pool`` mean pooling (desk-scale downscaling).
2. M conv blocks, each conv3x3 -> ReLU -> layer norm over (C, H, W) with
   per-channel gain/shift -> 2x2 mean pooling.
3. Flatten to Q tokens of width C, add learned positional embeddings.
4. N pre-norm transformer layers (multi-head attention + ReLU MLP).
5. Mean over tokens, linear projection C -> S: one vector per frame.
6. Add temporal positional embeddings, F pre-norm transformer layers over T.
7. Mean over frames: the clip feature of length S.

Parameters live in a flat ``dict`` name -> Tensor under an ``encoder.`` prefix.
"""

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PREFIX = "encoder."
FACE_WIDTH_DEFICIT = 1  # the face crop is one column narrower than the composed frame


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    conv_blocks: int = 2
    conv_width: int = 8
    spatial_layers: int = 2
    temporal_layers: int = 1
    embed_dim: int = 32
    heads: int = 4
    feature_dim: int = 64
    ffn_mult: int = 2
    in_channels: int = 1
    image_size: int = 112
    input_pool: int = 2
    frames: int = 16
    embed_count: int = 0  # 0: derive from the geometry

    def __post_init__(self):
        ints = (self.conv_blocks, self.conv_width, self.spatial_layers, self.temporal_layers,
                self.embed_dim, self.heads, self.feature_dim, self.ffn_mult,
                self.in_channels, self.image_size, self.input_pool, self.frames)
        if min(ints) < 1:
            raise EncoderError("all encoder sizes must be positive")
        if self.embed_dim % self.heads or self.feature_dim % self.heads:
            raise EncoderError(
                f"embed_dim {self.embed_dim} and feature_dim {self.feature_dim} "
                f"must be divisible by heads {self.heads}")
        side = self.image_size // self.input_pool
        if self.image_size % self.input_pool or side % (2 ** self.conv_blocks):
            raise EncoderError(
                f"image_size {self.image_size} / input_pool {self.input_pool} must be "
                f"divisible by 2**conv_blocks = {2 ** self.conv_blocks}")
        q = self.grid ** 2
        if self.embed_count not in (0, q):
            raise EncoderError(f"embed_count {self.embed_count} != derived token count {q}")

    @property
    def pooled_size(self):
        return self.image_size // self.input_pool

    @property
    def grid(self):
        return self.pooled_size // (2 ** self.conv_blocks)

    @property
    def tokens(self):
        return self.grid ** 2

    def channels(self):
        """(in, out) channel pairs of each conv block; the last block emits embed_dim."""
        outs = [min(self.embed_dim, self.conv_width * 2 ** b) for b in range(self.conv_blocks)]
        outs[-1] = self.embed_dim
        ins = [self.in_channels] + outs[:-1]
        return list(zip(ins, outs))

    def asdict(self):
        return asdict(self)


@dataclass(frozen=True)
class PreprocessedClip:
    """Composed frames (T, C, H, W): face crop columns plus one mask-bit column."""

    composed: np.ndarray
    mask_bit: int

    @property
    def face(self):
        return self.composed[..., :-FACE_WIDTH_DEFICIT]


def compose_input(face_frames, mask_bit):
    """Append the mask bit as a constant last column: (T, H, W-1) -> (T, 1, H, W).

    Multi-channel input (T, C, H, W-1) gets the column on every channel.
    """
    if mask_bit not in (0, 1, False, True):
        raise EncoderError(f"mask bit must be 0 or 1, got {mask_bit!r}")
    x = np.asarray(face_frames, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[2] != x.shape[3] + FACE_WIDTH_DEFICIT:
        raise EncoderError(
            f"face frames must be (T, H, H-1) or (T, C, H, H-1), got {np.shape(face_frames)}")
    col = np.full(x.shape[:3] + (1,), float(mask_bit))
    return PreprocessedClip(np.ascontiguousarray(np.concatenate([x, col], axis=3)), int(mask_bit))


def pool_input(composed, cfg):
    """Mean-pool composed frames (..., C, H, W) by ``cfg.input_pool`` as plain arrays."""
    x = np.asarray(composed, dtype=np.float64)
    k = cfg.input_pool
    if k == 1:
        return np.ascontiguousarray(x)
    *lead, c, h, w = x.shape
    return x.reshape(*lead, c, h // k, k, w // k, k).mean(axis=(-3, -1))


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

def _attn_params(gen, pre, d, ffn):
    p = {}
    for n in ("ln1", "ln2"):
        p[f"{pre}{n}.g"] = np.ones(d)
        p[f"{pre}{n}.b"] = np.zeros(d)
    for n in ("q", "k", "v", "o"):
        p[f"{pre}w{n}"] = gen.normal(0.0, 0.02, (d, d))
        p[f"{pre}b{n}"] = np.zeros(d)
    p[f"{pre}ffn.w1"] = gen.normal(0.0, 0.02, (d, ffn * d))
    p[f"{pre}ffn.b1"] = np.zeros(ffn * d)
    p[f"{pre}ffn.w2"] = gen.normal(0.0, 0.02, (ffn * d, d))
    p[f"{pre}ffn.b2"] = np.zeros(d)
    return p


def init_params(cfg, gen):
    """Gaussian(0, 0.02) weights and embeddings, zero biases, unit norm gains."""
    p = {}
    for b, (cin, cout) in enumerate(cfg.channels()):
        p[f"conv{b}.w"] = gen.normal(0.0, 0.02, (cout, cin, 3, 3))
        p[f"conv{b}.b"] = np.zeros(cout)
        p[f"conv{b}.ln.g"] = np.ones((cout, 1, 1))
        p[f"conv{b}.ln.b"] = np.zeros((cout, 1, 1))
    p["spatial.pos"] = gen.normal(0.0, 0.02, (cfg.tokens, cfg.embed_dim))
    for layer in range(cfg.spatial_layers):
        p.update(_attn_params(gen, f"spatial{layer}.", cfg.embed_dim, cfg.ffn_mult))
    p["proj.w"] = gen.normal(0.0, 0.02, (cfg.embed_dim, cfg.feature_dim))
    p["proj.b"] = np.zeros(cfg.feature_dim)
    p["temporal.pos"] = gen.normal(0.0, 0.02, (cfg.frames, cfg.feature_dim))
    for layer in range(cfg.temporal_layers):
        p.update(_attn_params(gen, f"temporal{layer}.", cfg.feature_dim, cfg.ffn_mult))
    out = {PREFIX + k: Tensor(v, requires_grad=True) for k, v in p.items()}
    # mean pooled frame subtracted from every input; set by calibrate()
    out[PREFIX + "input_mean"] = Tensor(np.zeros((cfg.in_channels, cfg.pooled_size,
                                                  cfg.pooled_size)))
    return out


def expected_shapes(cfg):
    gen = np.random.default_rng(0)
    return {k: v.shape for k, v in init_params(cfg, gen).items()}


def check_params(params, cfg):
    want = expected_shapes(cfg)
    for name, shape in want.items():
        if name not in params:
            raise EncoderError(f"missing encoder parameter {name!r}")
        if params[name].shape != shape:
            raise EncoderError(f"{name}: shape {params[name].shape}, config expects {shape}")


# --------------------------------------------------------------------------
# forward stages
# --------------------------------------------------------------------------

def _ln(x, params, pre):
    return ad.layer_norm(x, 1) * params[pre + ".g"] + params[pre + ".b"]


def multi_head_attention(x, params, pre, heads):
    """Self-attention over axis -2 of x (B, L, D)."""
    b, length, d = x.shape
    dh = d // heads

    def split(t):
        return ad.transpose(ad.reshape(t, (b, length, heads, dh)), (0, 2, 1, 3))

    q = split(x @ params[pre + "wq"] + params[pre + "bq"])
    k = split(x @ params[pre + "wk"] + params[pre + "bk"])
    v = split(x @ params[pre + "wv"] + params[pre + "bv"])
    o = ad.scaled_dot_product_attention(q, k, v)
    o = ad.reshape(ad.transpose(o, (0, 2, 1, 3)), (b, length, d))
    return o @ params[pre + "wo"] + params[pre + "bo"]


def transformer_layer(x, params, pre, heads):
    x = x + multi_head_attention(_ln(x, params, pre + "ln1"), params, pre, heads)
    h = ad.relu(_ln(x, params, pre + "ln2") @ params[pre + "ffn.w1"] + params[pre + "ffn.b1"])
    return x + (h @ params[pre + "ffn.w2"] + params[pre + "ffn.b2"])


def conv_tokens(x, params, cfg):
    """Conv blocks on pooled frames (B, C_in, h, w) -> tokens (B, Q, C)."""
    for b in range(cfg.conv_blocks):
        pre = f"{PREFIX}conv{b}"
        x = ad.relu(ad.conv2d(x, params[pre + ".w"], params[pre + ".b"], padding=1))
        x = ad.layer_norm(x, 3) * params[pre + ".ln.g"] + params[pre + ".ln.b"]
        x = ad.avg_pool2d(x, 2)
    bsz, c = x.shape[0], x.shape[1]
    return ad.transpose(ad.reshape(x, (bsz, c, -1)), (0, 2, 1))


def spatial_encoder(tokens, pos, params, cfg):
    """Tokens (B, Q, C) + positional embeddings (Q, C) -> mean-pooled vectors (B, C)."""
    z = tokens + pos
    for layer in range(cfg.spatial_layers):
        z = transformer_layer(z, params, f"{PREFIX}spatial{layer}.", cfg.heads)
    return ad.mean(z, axis=1)


def project(xs, params):
    return xs @ params[PREFIX + "proj.w"] + params[PREFIX + "proj.b"]


def temporal_encoder(frame_vecs, params, cfg):
    """Per-frame vectors (n, T, S) -> clip features (n, S)."""
    z = frame_vecs + params[PREFIX + "temporal.pos"]
    for layer in range(cfg.temporal_layers):
        z = transformer_layer(z, params, f"{PREFIX}temporal{layer}.", cfg.heads)
    return ad.mean(z, axis=1)


def _check_pooled(x, cfg):
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 5 or x.shape[1] != cfg.frames or x.shape[2] != cfg.in_channels \
            or x.shape[3:] != (cfg.pooled_size, cfg.pooled_size):
        raise EncoderError(
            f"pooled clips must be (n, {cfg.frames}, {cfg.in_channels}, "
            f"{cfg.pooled_size}, {cfg.pooled_size}), got {x.shape}")
    return x


def frame_vectors(x, params, cfg):
    """Pooled clips (n, T, C_in, h, w) -> mean-pooled token vectors (n, T, C), pre-projection."""
    x = _check_pooled(x, cfg)
    n, t = x.shape[:2]
    frames = ad.reshape(x, (n * t,) + x.shape[2:]) - params[PREFIX + "input_mean"]
    tokens = conv_tokens(frames, params, cfg)
    vecs = spatial_encoder(tokens, params[PREFIX + "spatial.pos"], params, cfg)
    return ad.reshape(vecs, (n, t, cfg.embed_dim))


def clip_features(vecs, params, cfg):
    """Frame vectors (n, T, C) -> clip features (n, S)."""
    return temporal_encoder(project(vecs, params), params, cfg)


def encode_pooled(x, params, cfg):
    """Pooled clips (n, T, C_in, h, w) as Tensor or array -> clip features (n, S)."""
    return clip_features(frame_vectors(x, params, cfg), params, cfg)


def calibrate(params, cfg, pooled_clips, eps=1e-8):
    """Data-dependent initialization from a list of pooled clip arrays.

    Sets the input mean to the average pooled frame, then rescales the
    projection so projected frame vectors have zero mean and unit variance
    per dimension over the given frames.  Returns the frame vectors
    (pre-projection, one (n, T, C) array per entry) for reuse.
    """
    frames = np.concatenate([np.asarray(c).reshape((-1,) + c.shape[-3:]) for c in pooled_clips])
    params[PREFIX + "input_mean"].data = np.ascontiguousarray(frames.mean(axis=0))
    with ad.no_grad():
        vecs = [frame_vectors(c, params, cfg).numpy() for c in pooled_clips]
    flat = np.concatenate([v.reshape(-1, cfg.embed_dim) for v in vecs])
    w, b = params[PREFIX + "proj.w"], params[PREFIX + "proj.b"]
    proj = flat @ w.data + b.data
    mu, sd = proj.mean(axis=0), proj.std(axis=0)
    sd = np.where(sd > eps, sd, 1.0)
    w.data = np.ascontiguousarray(w.data / sd)
    b.data = np.ascontiguousarray((b.data - mu) / sd)
    return vecs


def encode_composed(x, params, cfg):
    """Full-resolution composed clips (n, T, C, H, W) Tensor -> features (n, S).

    Pooling happens inside the graph, so gradients reach every input pixel.
    """
    n, t = x.shape[:2]
    if x.shape[2:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise EncoderError(
            f"composed clips must be (n, T, {cfg.in_channels}, {cfg.image_size}, "
            f"{cfg.image_size}), got {x.shape}")
    flat = ad.reshape(x, (n * t,) + x.shape[2:])
    if cfg.input_pool > 1:
        flat = ad.avg_pool2d(flat, cfg.input_pool)
    return encode_pooled(ad.reshape(flat, (n, t) + flat.shape[1:]), params, cfg)


def encode_clip(clip, params, cfg):
    """One PreprocessedClip -> its clip feature, a Tensor of shape (S,)."""
    check_params(params, cfg)
    x = Tensor(clip.composed[None])
    return encode_composed(x, params, cfg)[0]
