"""Encoder + recurrent head bundled with their configs, plus input preparation."""

import json
import os
from dataclasses import dataclass

import numpy as np

from . import checkpoint, encoder, recurrent, rng
from .autodiff import Tensor
from .encoder import EncoderConfig
from .recurrent import HeadConfig


def session_inputs(session, enc_cfg):
    """Composed and pooled frames of every clip: (K, T, C, h, w)."""
    out = [encoder.pool_input(encoder.compose_input(c.frames, int(c.mask)).composed, enc_cfg)
           for c in session.clips]
    return np.ascontiguousarray(np.stack(out))


def dataset_inputs(ds, enc_cfg):
    return {s.key: session_inputs(s, enc_cfg) for s in ds.sessions}


@dataclass
class Model:
    enc: EncoderConfig
    head: HeadConfig
    params: dict

    @classmethod
    def init(cls, enc, head, seed):
        if head.feature_dim != enc.feature_dim:
            raise ValueError(f"head feature_dim {head.feature_dim} != encoder feature_dim "
                             f"{enc.feature_dim}")
        params = encoder.init_params(enc, rng.stream(seed, "init/encoder"))
        params.update(recurrent.init_params(head, rng.stream(seed, "init/head")))
        return cls(enc, head, params)

    def trainable(self, freeze_encoder=False):
        out = {}
        for k, p in self.params.items():
            if freeze_encoder and k.startswith(encoder.PREFIX):
                p.requires_grad = False
            if p.requires_grad:
                out[k] = p
        return out

    def features(self, pooled):
        return encoder.encode_pooled(pooled, self.params, self.enc)

    def trace(self, pooled):
        return recurrent.run_session(self.features(pooled), self.params, self.head)

    def arrays(self):
        return {k: p.data for k, p in self.params.items()}

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        checkpoint.save(os.path.join(directory, "model.ckpt"), self.arrays())
        meta = {"encoder": self.enc.asdict(), "head": self.head.asdict()}
        with open(os.path.join(directory, "model.json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, directory):
        with open(os.path.join(directory, "model.json")) as fh:
            meta = json.load(fh)
        enc = EncoderConfig(**meta["encoder"])
        head = HeadConfig(**meta["head"])
        arrays = checkpoint.load(os.path.join(directory, "model.ckpt"))
        model = cls.init(enc, head, 0)
        if set(arrays) != set(model.params):
            missing = sorted(set(model.params) - set(arrays))
            extra = sorted(set(arrays) - set(model.params))
            raise checkpoint.CheckpointError(f"parameter mismatch: missing {missing}, extra {extra}")
        for k, v in arrays.items():
            if v.shape != model.params[k].shape:
                raise checkpoint.CheckpointError(f"{k}: stored shape {v.shape}, "
                                                 f"config expects {model.params[k].shape}")
            model.params[k].data = v
        return model
