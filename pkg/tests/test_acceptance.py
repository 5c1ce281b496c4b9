"""Acceptance gate: one test per headline criterion.

Each check returns ``(passed, detail)``; the outcome line is printed in the
pytest terminal summary and when this file is run as a script.
"""

import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ldcsf import data as dp  # noqa: E402
from ldcsf.attention import (  # noqa: E402
    cyclic_shift,
    region_ids,
    shifted_window_attention,
    window_partition,
    window_reverse,
)
from ldcsf.checkpoint import load_checkpoint, load_model_state, model_state, save_checkpoint  # noqa: E402
from ldcsf.cli import main as cli_main  # noqa: E402
from ldcsf.gradcheck import run_suite  # noqa: E402
from ldcsf.metrics import roc_curve  # noqa: E402
from ldcsf.model import LdcsfModel, ModelConfig, multilabel_loss  # noqa: E402
from ldcsf.tensor import Tensor, default_dtype, no_grad  # noqa: E402
from ldcsf.training import Dataset, TrainConfig, Trainer, train  # noqa: E402
from test_attention import _region_attention, make_attention, naive_attention  # noqa: E402
from test_metrics import mann_whitney, random_instance  # noqa: E402

RESULTS = []


def _record(name, check, *args):
    t0 = time.perf_counter()
    passed, detail = check(*args)
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail} ({time.perf_counter() - t0:.1f}s)"
    RESULTS.append(line)
    print(line)
    return passed, detail


# ------------------------------------------------------------------ checks


def check_gradients():
    t0 = time.perf_counter()
    results = run_suite(seed=0, model_samples=200, include_model=True)
    elapsed = time.perf_counter() - t0
    model = results[-1]
    worst = max(results, key=lambda r: r.max_rel_error)
    passed = all(r.passed for r in results) and model.checked >= 200 and elapsed < 120
    return passed, (f"{len(results)} cases, model entries {model.checked} (skipped {model.skipped} at kinks), "
                    f"worst {worst.name} {worst.max_rel_error:.2e}, {elapsed:.0f}s")


def check_attention_oracle():
    with default_dtype(np.float64):
        rng = np.random.default_rng(0)
        attn = make_attention(4, 2, 1)
        x = rng.normal(size=(4, 4, 4))
        out = attn(Tensor(x)).data
        ref, ref_w = naive_attention(attn, x)
        err = max(np.abs(out - ref).max(), np.abs(attn.last_weights[:, 0] - ref_w).max())

        mattn = make_attention(8, 2, 2, seed=3)
        grid = rng.normal(size=(1, 4, 4, 8))
        got = shifted_window_attention(mattn, Tensor(grid), 1).data
        rolled = np.roll(grid, (-1, -1), axis=(1, 2))
        labels = region_ids(4, 4, 2, 1)
        expect = np.zeros_like(rolled)
        for wr in (0, 2):
            for wc in (0, 2):
                cells = [(r, c) for r in range(wr, wr + 2) for c in range(wc, wc + 2)]
                for region in np.unique([labels[rc] for rc in cells]):
                    members = [(i, rc) for i, rc in enumerate(cells) if labels[rc] == region]
                    toks = np.array([rolled[0, r, c] for _, (r, c) in members])
                    res = _region_attention(mattn, toks, [i for i, _ in members])
                    for (_, (r, c)), row in zip(members, res):
                        expect[0, r, c] = row
        region_err = np.abs(got - np.roll(expect, (1, 1), axis=(1, 2))).max()
    return err <= 1e-6 and region_err <= 1e-6, f"oracle err {err:.1e}, per-region err {region_err:.1e}"


def check_round_trips(tmp):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 8, 12, 5)).astype(np.float32)
    part = window_reverse(window_partition(Tensor(x), 4), 4, 8, 12).data.tobytes() == x.tobytes()
    shift = cyclic_shift(cyclic_shift(Tensor(x), 3), 3, inverse=True).data.tobytes() == x.tobytes()

    model = LdcsfModel(ModelConfig.toy(), seed=5)
    model(Tensor(rng.random((3, 3, 32, 32))))
    model.eval()
    params, buffers = model_state(model)
    save_checkpoint(tmp / "rt.ckpt", {}, params, buffers)
    fresh = LdcsfModel(ModelConfig.toy(), seed=6).eval()
    load_model_state(fresh, load_checkpoint(tmp / "rt.ckpt"))
    batch = Tensor(rng.random((2, 3, 32, 32)))
    with no_grad():
        ckpt = fresh(batch).data.tobytes() == model(batch).data.tobytes()

    img = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
    hsv_err = int(np.abs(dp.adjust_hsv(img).astype(int) - img.astype(int)).max())
    passed = part and shift and ckpt and hsv_err <= 1
    return passed, f"partition {part}, shift {shift}, checkpoint {ckpt}, HSV max err {hsv_err}/255"


def check_shape_ladder():
    model = LdcsfModel(ModelConfig(), seed=0)
    x = Tensor(np.random.default_rng(2).random((2, 3, 224, 224)))
    with no_grad():
        logits = model(x)
    tokens = [t[1] for t in model.trace]
    dims = [t[2] for t in model.trace]
    passed = tokens == [3136, 784, 196, 49] and dims == [96, 192, 384, 768] and logits.shape == (2, 4)
    return passed, f"tokens {tokens}, dims {dims}, logits {list(logits.shape)}"


def _flops(capsys, h, w):
    code = cli_main(["flops", "--h", str(h), "--w", str(w), "--c", "96", "--m", "7"])
    return code, int(capsys.readouterr().out.strip())


def check_flops(capsys):
    code, base = _flops(capsys, 56, 56)
    code2, doubled = _flops(capsys, 56, 112)
    passed = code == code2 == 0 and base == 145108992 and doubled == 2 * base
    return passed, f"flops {base}, doubled area {doubled}"


def check_overfit():
    images, targets = dp.synthetic_tiles(32, 32, seed=0)
    ds = Dataset(images, targets, list(range(32)))
    # optimiser defaults: lr 0.001, momentum 0.9, weight decay 1e-4
    cfg = TrainConfig(epochs=200, batch_size=32, model=ModelConfig.toy(), augment=False, seed=0)
    trainer = Trainer(cfg)
    t0 = time.perf_counter()
    last = None
    while trainer.step < 200:
        last = trainer.train_epoch(ds)[-1]
    elapsed = time.perf_counter() - t0
    pred = (trainer.predict(ds) >= 0.5).astype(int)
    acc = (pred == targets).mean(axis=0)
    combos = len({tuple(t) for t in targets})
    passed = last["L"] < 0.05 and acc.min() >= 0.95 and elapsed < 300 and combos == 6
    return passed, (f"{trainer.step} steps, train L {last['L']:.4f}, per-label acc "
                    f"{np.round(acc, 3).tolist()}, {combos} combinations, {elapsed:.0f}s")


def check_ablation():
    x = Tensor(np.random.default_rng(3).random((2, 3, 32, 32)))
    variants = {
        "full": ModelConfig.toy(),
        "no_ldc": ModelConfig.toy(ldc_enabled=False),
        "no_fr": ModelConfig.toy(fr_enabled=False),
        "none": ModelConfig.toy(ldc_enabled=False, fr_enabled=False),
    }
    names, outs = {}, {}
    for key, cfg in variants.items():
        model = LdcsfModel(cfg, seed=0)
        names[key] = {n for n, _ in model.named_parameters()}
        with no_grad():
            outs[key] = model(x).data

    def groups(removed):
        return {n.split(".")[2] for n in removed}

    ok = (groups(names["full"] - names["no_ldc"]) == {"ldc"} and names["no_ldc"] < names["full"]
          and groups(names["full"] - names["no_fr"]) == {"fr"} and names["no_fr"] < names["full"]
          and groups(names["full"] - names["none"]) == {"ldc", "fr"})
    diffs = {k: float(np.abs(outs["full"] - outs[k]).max()) for k in ("no_ldc", "no_fr", "none")}
    passed = ok and all(d > 0 for d in diffs.values())
    return passed, "param groups exact: " + str(ok) + ", L-inf diffs " + ", ".join(
        f"{k} {v:.2e}" for k, v in diffs.items())


def check_auc_oracle():
    worst = 0.0
    for n in (10, 100):
        rng = np.random.default_rng(100 + n)
        for _ in range(1000):
            scores, truth = random_instance(rng, n)
            worst = max(worst, abs(roc_curve(scores, truth).auc - mann_whitney(scores, truth)))
    return worst <= 1e-9, f"2000 instances, max |AUC - MW| {worst:.1e}"


def check_loss_decomposition(tmp):
    manifest = dp.write_synthetic_dataset(tmp / "syn", 30, 32, seed=1)
    cfg = TrainConfig(epochs=2, batch_size=8, model=ModelConfig.toy(), seed=1)
    train(manifest, cfg, tmp / "run")
    steps = [json.loads(s) for s in (tmp / "run/train_log.jsonl").read_text().splitlines()]
    steps = [r for r in steps if r["kind"] == "step"]
    exact = all(r["L"] == ((r["l_i"] + r["l_m"]) + r["l_t"]) + r["l_n"] for r in steps)
    uniform = multilabel_loss(Tensor(np.zeros((6, 4))), np.eye(4, dtype=int)[[0, 1, 2, 3, 0, 3]]).L
    err = abs(uniform - 4 * math.log(2))
    return exact and err <= 1e-6, f"{len(steps)} logged steps exact: {exact}, |L_uniform - 4 ln 2| {err:.1e}"


def check_determinism(tmp, capsys):
    cli_main(["synth", "--out", str(tmp / "syn"), "--count", "30", "--size", "32", "--seed", "7"])
    for run in ("a", "b"):
        code = cli_main(["train", "--manifest", str(tmp / "syn/manifest.jsonl"), "--out", str(tmp / run),
                         "--toy", "--epochs", "2", "--batch-size", "8", "--seed", "7", "--checkpoint-every", "1"])
        assert code == 0
    capsys.readouterr()
    files = sorted(p.relative_to(tmp / "a") for p in (tmp / "a").rglob("*") if p.is_file())
    same = all((tmp / "a" / f).read_bytes() == (tmp / "b" / f).read_bytes() for f in files)
    ckpts = [f for f in files if f.suffix == ".ckpt"]
    return same and len(ckpts) >= 2, f"{len(files)} files compared ({len(ckpts)} checkpoints), identical: {same}"


# ------------------------------------------------------------------- tests


def test_gradient_suite():
    assert _record("gradient suite", check_gradients)[0]


def test_attention_oracle():
    assert _record("attention oracle", check_attention_oracle)[0]


def test_round_trips(tmp_path):
    assert _record("round-trips", check_round_trips, tmp_path)[0]


def test_shape_ladder():
    assert _record("shape ladder", check_shape_ladder)[0]


def test_complexity_estimator(capsys):
    assert _record("complexity estimator", check_flops, capsys)[0]


def test_overfit():
    assert _record("overfit", check_overfit)[0]


def test_ablation_mechanics():
    assert _record("ablation mechanics", check_ablation)[0]


def test_auc_oracle():
    assert _record("AUC oracle", check_auc_oracle)[0]


def test_loss_decomposition(tmp_path):
    assert _record("loss decomposition", check_loss_decomposition, tmp_path)[0]


def test_determinism(tmp_path, capsys):
    assert _record("determinism", check_determinism, tmp_path, capsys)[0]


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
