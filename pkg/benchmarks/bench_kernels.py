"""Time the numba kernels against the numpy fallback, plus one end-to-end training step.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from rvt import _kernels as K
from rvt import encoder, recurrent, training
from rvt.data import generate_synthetic, SynthConfig
from rvt.model import Model, session_inputs


def cases(gen):
    x4 = gen.normal(size=(128, 8, 18, 18))
    cols = K._im2col_np(x4, 3, 3)
    rows = gen.normal(size=(2048, 32))
    y, rstd = K._layernorm_fwd_np(rows, 1e-10)
    sm = K._softmax_fwd_np(rows)
    img = gen.normal(size=(128, 8, 16, 16))
    pooled = K._avgpool_fwd_np(img, 2)
    ranks = np.arange(2, 2 * 40 + 1, 2, dtype=np.int64)
    return [
        ("im2col 128x8x18x18 k3", lambda: K.im2col(x4, 3, 3)),
        ("col2im 128x8x18x18 k3", lambda: K.col2im(cols, 18, 18)),
        ("layernorm fwd 2048x32", lambda: K.layernorm_fwd(rows, 1e-10)),
        ("layernorm bwd 2048x32", lambda: K.layernorm_bwd(rows, y, rstd)),
        ("softmax fwd 2048x32", lambda: K.softmax_fwd(rows)),
        ("softmax bwd 2048x32", lambda: K.softmax_bwd(rows, sm)),
        ("avgpool fwd 128x8x16x16", lambda: K.avgpool_fwd(img, 2)),
        ("avgpool bwd 128x8x8x8", lambda: K.avgpool_bwd(pooled, 2)),
        ("signed-rank counts n=40", lambda: K.signed_rank_counts(ranks)),
    ]


def best_of(fn, repeat):
    fn()  # warm-up (numba compiles here)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def train_step_case():
    ds = generate_synthetic(SynthConfig(n_participants=2, sessions_per_participant=1), seed=0)
    enc = encoder.EncoderConfig(**training.SYNTHETIC_ENCODER)
    s = ds.sessions[0]
    x = session_inputs(s, enc)
    model = Model.init(enc, training.TrainConfig().head_config(enc), 0)

    def step():
        loss = recurrent.session_loss(model.trace(x), s.pre, s.post, "binary")
        loss.backward()
        for p in model.params.values():
            p.grad = None
    return "full session fwd+bwd (8 clips)", step


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    gen = np.random.default_rng(0)
    rows = cases(gen) + [train_step_case()]
    backends = ["numpy"] + (["numba"] if K.HAS_NUMBA else [])
    results = {}
    for b in backends:
        K.set_backend(b)
        for name, fn in rows:
            results[(name, b)] = best_of(fn, args.repeat)
    print(f"{'kernel':<34}" + "".join(f"{b + ' ms':>12}" for b in backends) + f"{'speedup':>10}")
    for name, _ in rows:
        line = f"{name:<34}" + "".join(f"{results[(name, b)] * 1e3:>12.3f}" for b in backends)
        if len(backends) == 2:
            line += f"{results[(name, 'numpy')] / results[(name, 'numba')]:>10.2f}"
        print(line)


if __name__ == "__main__":
    main()
