"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--end-to-end]

Shapes match the default model (batch 32, hidden 32, about 30 frames).
``--end-to-end`` also times one training epoch in a subprocess per
backend, toggled through ALCR_PURE_PYTHON.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from alcr import _fallback

try:
    from alcr import _kernels
except ImportError:
    _kernels = None


def gru_inputs(batch, steps, size, seed=0):
    rng = np.random.default_rng(seed)
    xg = rng.normal(size=(batch, steps, 3 * size))
    h0 = rng.normal(size=(batch, size))
    w_h = rng.normal(scale=0.2, size=(size, 3 * size))
    b_h = rng.normal(size=3 * size)
    mask = (np.arange(steps)[None] < rng.integers(steps // 2, steps + 1, size=batch)[:, None])
    return xg, h0, w_h, b_h, mask.astype(float)


def cases(batch, steps, size):
    xg, h0, w_h, b_h, mask = gru_inputs(batch, steps, size)
    dhs = np.random.default_rng(1).normal(size=(batch, steps, size))
    rng = np.random.default_rng(2)
    strings = [("".join(rng.choice(list("abcdefghijkl"), size=rng.integers(3, 11))),
                "".join(rng.choice(list("abcdefghijkl"), size=rng.integers(3, 11))))
               for _ in range(300)]

    def forward(mod):
        return lambda: mod.gru_scan_forward(xg, h0, w_h, b_h, mask)

    def backward(mod):
        hs, cache = mod.gru_scan_forward(xg, h0, w_h, b_h, mask)
        return lambda: mod.gru_scan_backward(dhs, xg, h0, w_h, mask, hs, cache)

    def edits(mod):
        return lambda: [mod.edit_distance(a, b) for a, b in strings]

    return {"gru_scan_forward": forward, "gru_scan_backward": backward,
            "edit_distance x300": edits}


def time_call(fn, repeat):
    number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-6)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def check_agreement(batch, steps, size):
    xg, h0, w_h, b_h, mask = gru_inputs(batch, steps, size)
    a, _ = _fallback.gru_scan_forward(xg, h0, w_h, b_h, mask)
    b, _ = _kernels.gru_scan_forward(xg, h0, w_h, b_h, mask)
    return float(np.abs(a - b).max())


EPOCH_SNIPPET = """
import time
from alcr import kernels
from alcr.corpus import generate_corpus
from alcr.pipeline import FeatureStore, PipelineConfig, train_initial
c = generate_corpus(0, sizes={"initial": 64, "unlabeled": 1, "test": 1})
s = FeatureStore(c)
for u in c.utterances("initial"):
    s.genuine(u.id)
t = time.perf_counter()
train_initial(c, cfg=PipelineConfig(epochs_initial=1), store=s)
print(kernels.COMPILED, time.perf_counter() - t)
"""


def end_to_end():
    out = {}
    for pure in (False, True):
        env = dict(os.environ)
        env.pop("ALCR_PURE_PYTHON", None)
        if pure:
            env["ALCR_PURE_PYTHON"] = "1"
        res = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, check=True,
                             capture_output=True, text=True)
        compiled, seconds = res.stdout.split()
        out["compiled" if compiled == "True" else "fallback"] = float(seconds)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--steps", type=int, default=30)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args(argv)
    if _kernels is None:
        sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation`")

    print(f"max |compiled - fallback| (gru forward): "
          f"{check_agreement(args.batch, args.steps, args.size):.2e}")
    print(f"{'kernel':<22}{'fallback ms':>12}{'compiled ms':>13}{'speedup':>9}")
    for name, make in cases(args.batch, args.steps, args.size).items():
        slow = time_call(make(_fallback), args.repeat)
        fast = time_call(make(_kernels), args.repeat)
        print(f"{name:<22}{slow * 1e3:>12.3f}{fast * 1e3:>13.3f}{slow / fast:>8.1f}x")
    if args.end_to_end:
        t = end_to_end()
        print(f"{'one training epoch':<22}{t['fallback'] * 1e3:>12.0f}{t['compiled'] * 1e3:>13.0f}"
              f"{t['fallback'] / t['compiled']:>8.1f}x")


if __name__ == "__main__":
    main()
