"""Central finite-difference gradient checks at float64.

The suite covers every differentiable primitive and layer kind plus the
end-to-end toy model.  Relative error per checked entry is
``|analytic - numeric| / max(|analytic|, |numeric|, floor)``; the floor
(1e-6) keeps entries whose true gradient is zero from dividing by noise.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import ops
from .attention import WindowAttention, build_shift_mask, shifted_window_attention
from .layers import BatchNorm2d, Conv2d, DepthwiseConv2d, LayerNorm, Linear, init_parameters
from .model import (
    FeatureReconstruction,
    LdcsfModel,
    LocalDepthConv,
    ModelConfig,
    PatchMerging,
    ResNetHead,
    SwinBlock,
    multilabel_loss,
)
from .tensor import Tensor, backward, default_dtype, make_rng, parameter

STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-6


@dataclass
class GradResult:
    name: str
    checked: int
    max_rel_error: float
    seconds: float
    skipped: int = 0

    @property
    def passed(self):
        return self.max_rel_error <= TOLERANCE

    def row(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<22} {self.checked:>6} {self.skipped:>4} {self.max_rel_error:>12.3e}  {status}"


def _entries(params, rng, samples, per_tensor):
    """Pick (name, flat index) pairs: ``per_tensor`` from each tensor, then
    ``samples`` more uniformly over all entries."""
    names = list(params)
    chosen = []
    for name in names:
        size = params[name].size
        k = min(per_tensor, size)
        chosen += [(name, int(i)) for i in rng.choice(size, size=k, replace=False)]
    if samples:
        sizes = np.array([params[n].size for n in names])
        flat = rng.choice(int(sizes.sum()), size=min(samples, int(sizes.sum())), replace=False)
        bounds = np.cumsum(sizes)
        for f in flat:
            t = int(np.searchsorted(bounds, f, side="right"))
            start = bounds[t - 1] if t else 0
            chosen.append((names[t], int(f - start)))
    return sorted(set(chosen))


def check_gradients(loss_fn, params, rng=None, samples=None, per_tensor=None, step=STEP):
    """Compare backprop gradients of ``loss_fn()`` against central differences.

    ``params`` maps name -> leaf Tensor (inputs included).  With neither
    ``samples`` nor ``per_tensor`` given, every entry is checked.  Entries
    whose +-step perturbation flips a piecewise op's branch are skipped, since
    the function is not differentiable across that interval; the returned
    count excludes them.
    """
    rng = rng or make_rng(0, "gradcheck")
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    analytic = {n: p.grad.copy() for n, p in params.items()}
    if samples is None and per_tensor is None:
        picks = [(n, i) for n, p in params.items() for i in range(p.size)]
    else:
        picks = _entries(params, rng, samples or 0, per_tensor or 0)
    with ops.track_regimes() as base:
        loss_fn()
    base = list(base)
    worst, worst_at, skipped = 0.0, None, 0
    for name, i in picks:
        flat = params[name].data.reshape(-1)
        orig = flat[i]
        with ops.track_regimes() as seen_up:
            flat[i] = orig + step
            up = float(loss_fn().data)
        with ops.track_regimes() as seen_down:
            flat[i] = orig - step
            down = float(loss_fn().data)
        flat[i] = orig
        if seen_up != base or seen_down != base:
            # a ReLU / hard-swish breakpoint lies inside [x-h, x+h]
            skipped += 1
            continue
        num = (up - down) / (2 * step)
        ana = float(analytic[name].reshape(-1)[i])
        err = abs(ana - num) / max(abs(ana), abs(num), FLOOR)
        if err > worst:
            worst, worst_at = err, (name, i, ana, num)
    check_gradients.last_worst = worst_at
    check_gradients.last_skipped = skipped
    return len(picks) - skipped, worst


# ------------------------------------------------------------------- cases


def _projection(rng, shape):
    return rng.normal(size=shape)


def _layer_case(module, x_shape, forward, rng, x_scale=1.0):
    """Loss = sum(forward(x) * R) for a fixed random R."""
    init_parameters(module, int(rng.integers(1 << 30)))
    for _, p in module.named_parameters():
        # move off symmetric inits so every gradient path is exercised
        p.data += rng.normal(0.0, 0.1, size=p.shape)
    x = parameter(rng.normal(0.0, x_scale, size=x_shape), name="input")
    probe = {}

    def loss():
        out = forward(x)
        if "r" not in probe:
            probe["r"] = _projection(rng, out.shape)
        return ops.sum(out * probe["r"])

    params = {"input": x, **dict(module.named_parameters())}
    return loss, params


def _op_case(fn, shapes, rng, scale=1.0):
    xs = {f"x{i}": parameter(rng.normal(0.0, scale, size=s), name=f"x{i}") for i, s in enumerate(shapes)}
    probe = {}

    def loss():
        out = fn(*xs.values())
        if "r" not in probe:
            probe["r"] = _projection(rng, out.shape)
        return ops.sum(out * probe["r"])

    return loss, xs


def layer_cases(rng):
    """name -> (loss_fn, params) for every primitive and layer kind."""
    cases = {}
    cases["matmul"] = _op_case(ops.matmul, [(3, 4), (4, 2)], rng)
    cases["batched_matmul"] = _op_case(ops.matmul, [(2, 3, 4), (2, 4, 5)], rng)
    cases["softmax"] = _op_case(ops.softmax, [(3, 5)], rng)
    cases["sigmoid"] = _op_case(ops.sigmoid, [(4, 3)], rng, 2.0)
    cases["relu"] = _op_case(ops.relu, [(4, 3)], rng)
    cases["gelu"] = _op_case(ops.gelu, [(4, 3)], rng, 2.0)
    cases["h_swish"] = _op_case(ops.h_swish, [(6, 5)], rng, 3.0)
    cases["global_avg_pool"] = _op_case(ops.global_avg_pool, [(2, 3, 4, 5)], rng)
    cases["roll_pad_concat"] = _op_case(
        lambda a, b: ops.concat([ops.roll(a, (1, -1), (1, 2)), ops.pad(b, ((0, 0), (0, 1), (1, 0)))], axis=0),
        [(2, 3, 3), (2, 2, 2)], rng)
    lin = Linear(5, 3)
    cases["linear"] = _layer_case(lin, (2, 4, 5), lin, rng)
    ln = LayerNorm(6)
    cases["layer_norm"] = _layer_case(ln, (3, 6), ln, rng)
    bn = BatchNorm2d(3)
    cases["batch_norm2d"] = _layer_case(bn, (2, 3, 3, 3), bn, rng)
    conv = Conv2d(3, 4, 3, bias=True)
    cases["conv2d"] = _layer_case(conv, (2, 3, 5, 5), conv, rng)
    pw = Conv2d(3, 4, 1)
    cases["conv2d_1x1"] = _layer_case(pw, (2, 3, 4, 4), pw, rng)
    dw = DepthwiseConv2d(3, 3, bias=True)
    cases["depthwise_conv2d"] = _layer_case(dw, (2, 3, 5, 4), dw, rng)

    attn = WindowAttention(8, 2, 2)
    mask = build_shift_mask(4, 4, 2, 1)
    cases["window_attention"] = _layer_case(attn, (8, 4, 8), lambda x: attn(x, mask=mask), rng)
    attn2 = WindowAttention(8, 2, 2)
    cases["shifted_window_attn"] = _layer_case(
        attn2, (2, 5, 5, 8), lambda x: shifted_window_attention(attn2, x, 1), rng)
    block = SwinBlock(8, 4, 2, 2, shifted=True)
    cases["swin_block"] = _layer_case(block, (2, 16, 8), block, rng)
    ldc = LocalDepthConv(8, 3, 4)
    cases["ldc"] = _layer_case(ldc, (2, 16, 8), lambda x: ldc(x, 4), rng)
    fr = FeatureReconstruction(8, 4)
    cases["fr"] = _layer_case(fr, (2, 8, 3, 3), fr, rng)
    merge = PatchMerging(4)
    cases["patch_merging"] = _layer_case(merge, (2, 16, 4), lambda x: merge(x, 4), rng)
    head = ResNetHead(6, units=2, dropout_rate=0.0)
    cases["resnet_head"] = _layer_case(head, (2, 4, 6), lambda x: head(x, 2), rng)
    return {k: v for k, v in cases.items() if v is not None}


def model_case(rng, batch=4, seed=0):
    cfg = ModelConfig.toy(dropout_rate=0.0)
    model = LdcsfModel(cfg, seed=seed).train()
    img = Tensor(rng.random((batch, 3, cfg.img_size, cfg.img_size)))
    targets = rng.integers(0, 2, size=(batch, 4))

    def loss():
        return multilabel_loss(model(img), targets).total

    return loss, dict(model.named_parameters()), model


def run_suite(seed=0, model_samples=200, include_model=True):
    """Run every case at float64; returns a list of :class:`GradResult`."""
    results = []
    with default_dtype(np.float64):
        rng = make_rng(seed, "gradcheck-suite")
        for name, (loss_fn, params) in layer_cases(rng).items():
            t0 = time.perf_counter()
            n, err = check_gradients(loss_fn, params, rng)
            results.append(GradResult(name, n, err, time.perf_counter() - t0, check_gradients.last_skipped))
        if include_model:
            t0 = time.perf_counter()
            loss_fn, params, _ = model_case(rng, seed=seed)
            n, err = check_gradients(loss_fn, params, rng, samples=model_samples, per_tensor=1)
            results.append(
                GradResult("model_end_to_end", n, err, time.perf_counter() - t0, check_gradients.last_skipped))
    return results
