"""Compare the numba and pure-numpy convolution kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Times each kernel (forward and backward) at a few shapes taken from the model,
plus one full toy-model training step, under both backends.  Outputs are
checked for agreement before any timing is reported.
"""

import argparse
import json
import platform
import time

import numpy as np

from ldcsf import kernels
from ldcsf._backend import HAS_NUMBA, use_backend
from ldcsf.model import LdcsfModel, ModelConfig, multilabel_loss
from ldcsf.optim import SGD
from ldcsf.tensor import Tensor, backward

# (label, x shape, weight shape); shapes follow the head and LDC of the
# full-size model (7x7 grid, 768 ch; 56x56 grid, 384 hidden) at batch 2
CASES = [
    ("conv3x3 head 7x7x768", (2, 768, 7, 7), (768, 768, 3, 3)),
    ("conv3x3 toy 1x1x64", (8, 64, 1, 1), (64, 64, 3, 3)),
    ("conv3x3 28x28x64", (2, 64, 28, 28), (64, 64, 3, 3)),
    ("dwconv3x3 56x56x384", (2, 384, 56, 56), (384, 3, 3)),
    ("dwconv3x3 8x8x32 toy", (8, 32, 8, 8), (32, 3, 3)),
]


def best_of(fn, repeat):
    fn()  # warm-up (triggers jit compilation / cache load)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_fns(x, w, g):
    if w.ndim == 4:
        return (lambda: kernels.conv2d_forward(x, w)), (lambda: kernels.conv2d_backward(x, w, g))
    return (lambda: kernels.depthwise_conv2d_forward(x, w)), (lambda: kernels.depthwise_conv2d_backward(x, w, g))


def check_agreement(x, w, g):
    outs = {}
    for b in ("numpy", "numba"):
        with use_backend(b):
            fwd, bwd = kernel_fns(x, w, g)
            outs[b] = (fwd(), *bwd())
    for a, b in zip(outs["numpy"], outs["numba"]):
        np.testing.assert_allclose(a, b, rtol=2e-3, atol=2e-3)


def train_step_fn():
    rng = np.random.default_rng(0)
    model = LdcsfModel(ModelConfig.toy(), seed=0)
    opt = SGD(model.named_parameters())
    x = Tensor(rng.random((8, 3, 32, 32)))
    y = rng.integers(0, 2, (8, 4))

    def step():
        opt.zero_grad()
        backward(multilabel_loss(model(x), y).total)
        opt.step()

    return step


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json", help="also write results here")
    args = parser.parse_args(argv)
    if not HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    rows = []
    for label, xs, ws in CASES:
        x = rng.normal(size=xs).astype(np.float32)
        w = rng.normal(size=ws).astype(np.float32) * 0.05
        g = rng.normal(size=(xs[0], ws[0] if len(ws) == 4 else xs[1], *xs[2:])).astype(np.float32)
        check_agreement(x, w, g)
        for phase in ("forward", "backward"):
            row = {"case": label, "phase": phase}
            for b in ("numpy", "numba"):
                with use_backend(b):
                    fwd, bwd = kernel_fns(x, w, g)
                    row[b] = best_of(fwd if phase == "forward" else bwd, args.repeat)
            rows.append(row)
    row = {"case": "toy train step (batch 8)", "phase": "fwd+bwd+sgd"}
    for b in ("numpy", "numba"):
        with use_backend(b):
            row[b] = best_of(train_step_fn(), args.repeat)
    rows.append(row)

    print(f"{'case':<26} {'phase':<12} {'numpy ms':>10} {'numba ms':>10} {'speed-up':>9}")
    for r in rows:
        print(f"{r['case']:<26} {r['phase']:<12} {r['numpy'] * 1e3:>10.2f} {r['numba'] * 1e3:>10.2f} "
              f"{r['numpy'] / r['numba']:>8.2f}x")
    if args.json:
        meta = {"python": platform.python_version(), "numpy": np.__version__, "machine": platform.machine()}
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"meta": meta, "results": rows}, fh, indent=2)


if __name__ == "__main__":
    main()
