"""Time the hot kernels under the numba backend and the pure-numpy fallback.

Each backend runs in its own interpreter because the choice is fixed at import
time by ``TEDSNET_DISABLE_NUMBA``.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit


def _cases():
    import numpy as np

    from tedsnet import _kernels as K
    from tedsnet import losses as L
    from tedsnet import network as N
    from tedsnet import ndtensor as nt
    from tedsnet.config import ModelConfig
    from tedsnet.synthdata import make_prior

    rng = np.random.default_rng(0)
    img = rng.random((5, 1, 128, 192))
    rows = np.clip(np.arange(128)[None, :, None] + rng.normal(0, 3, (5, 128, 192)), 0, 127)
    cols = np.clip(np.arange(192)[None, None, :] + rng.normal(0, 3, (5, 128, 192)), 0, 191)
    gout = rng.normal(size=(5, 1, 128, 192))
    pool_in = rng.random((5, 1, 128, 192))
    mask = rng.random((64, 96)) < 0.5
    a = rng.random((64, 96)) < 0.1
    b = rng.random((64, 96)) < 0.1

    model = N.build(ModelConfig(), 64, 96)
    for k, p in model.params.items():
        if ".head." in k:
            p.data = rng.normal(0, 0.02, p.shape)
    prior = make_prior(64, 96, 13, 8).astype(float)
    x = rng.random((5, 1, 64, 96))
    y = rng.random((5, 64, 96)) < 0.3
    opt = nt.Adam(model.parameters())

    def train_step():
        out = N.teds_forward(model, x, prior)
        loss = L.dice_loss(out.y_soft, y)
        opt.zero_grad()
        loss.backward()

    return {
        "bilinear_sample": lambda: K.bilinear_sample(img, rows, cols),
        "bilinear_sample_grad": lambda: K.bilinear_sample_grad(img, rows, cols, gout),
        "maxpool2x2": lambda: K.maxpool2x2(pool_in),
        "label_64x96": lambda: K.label(mask, 4),
        "directed_hausdorff": lambda: K.directed_hausdorff(a, b),
        "forward_backward_batch5": train_step,
    }


def child(repeat: int) -> None:
    from tedsnet import backend

    cases = _cases()
    result = {"backend": backend(), "times": {}}
    for name, fn in cases.items():
        fn()  # warm-up (and numba compilation)
        result["times"][name] = min(timeit.repeat(fn, number=1, repeat=repeat))
    print(json.dumps(result))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        child(args.repeat)
        return
    runs = {}
    for flag in ("0", "1"):
        env = dict(os.environ, TEDSNET_DISABLE_NUMBA=flag)
        proc = subprocess.run(
            [sys.executable, __file__, "--child", "--repeat", str(args.repeat)],
            env=env,
            capture_output=True,
            text=True,
            check=True,
        )
        res = json.loads(proc.stdout.strip().splitlines()[-1])
        runs[res["backend"]] = res["times"]
    names = list(next(iter(runs.values())))
    backends = list(runs)
    print(f"{'kernel':28s}" + "".join(f"{b:>14s}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for n in names:
        line = f"{n:28s}" + "".join(f"{runs[b][n] * 1e3:12.2f}ms" for b in backends)
        if len(backends) == 2:
            line += f"{runs[backends[1]][n] / runs[backends[0]][n]:11.2f}x"
        print(line)


if __name__ == "__main__":
    main()
