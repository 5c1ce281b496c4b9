import json

import numpy as np
import pytest

from ldcsf import cli
from ldcsf import data as dp
from ldcsf.cli import main
from ldcsf.model import LABELS


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_flops(capsys):
    code, out, _ = run(capsys, "flops", "--h", 56, "--w", 56, "--c", 96, "--m", 7)
    assert code == 0 and out.strip() == "145108992"


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["flops", "--h", "56"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    code, _, err = run(capsys, "patchify", "--out", "unused")
    assert code == 1 and "--demo" in err


def test_patchify_demo_is_deterministic(capsys, tmp_path):
    code, out, _ = run(capsys, "patchify", "--demo", "--out", tmp_path / "a", "--seed", 1)
    assert code == 0
    assert "interstitial_area & tumor" in out and "total" in out
    run(capsys, "patchify", "--demo", "--out", tmp_path / "b", "--seed", 1, "--workers", 3)
    assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()


def test_patchify_huge_ratio_keeps_everything(capsys, tmp_path):
    run(capsys, "patchify", "--demo", "--out", tmp_path, "--balance-ratio", "1e9")
    assert len(dp.read_manifest(tmp_path / "manifest.jsonl")) == 64


def test_patchify_from_files_matches_demo(capsys, tmp_path):
    slide, masks = dp.demo_slide()
    dp.save_rgb(slide, tmp_path / "slide.png")
    args = []
    for label, mask in masks.items():
        dp.save_rgb(np.repeat(mask[..., None] * 255, 3, axis=2), tmp_path / f"{label}.png")
        args.append(f"{label}={tmp_path / label}.png")
    code, _, _ = run(capsys, "patchify", "--slide", tmp_path / "slide.png", "--masks", *args, "--out", tmp_path / "f")
    assert code == 0
    run(capsys, "patchify", "--demo", "--out", tmp_path / "d")
    assert (tmp_path / "f/manifest.jsonl").read_bytes() == (tmp_path / "d/manifest.jsonl").read_bytes()
    code, _, err = run(capsys, "patchify", "--slide", tmp_path / "slide.png", "--masks", args[0], "--out", tmp_path / "g")
    assert code == 1 and "missing masks" in err


def test_splits_rebases_paths(capsys, tmp_path):
    run(capsys, "patchify", "--demo", "--out", tmp_path / "tiles")
    code, out, _ = run(capsys, "splits", "--manifest", tmp_path / "tiles/manifest.jsonl", "--out",
                       tmp_path / "split", "--rounds", 3)
    assert code == 0 and "round 0 test" in out
    records = dp.read_manifest(tmp_path / "split/manifest.jsonl")
    assert all(set(r.splits) == {0, 1, 2} for r in records)
    assert all(dp.resolve_path(r, tmp_path / "split/manifest.jsonl").exists() for r in records)


@pytest.fixture
def trained(tmp_path, capsys):
    run(capsys, "synth", "--out", tmp_path / "syn", "--count", 36, "--size", 32)
    manifest = tmp_path / "syn/manifest.jsonl"
    code, _, _ = run(capsys, "train", "--manifest", manifest, "--out", tmp_path / "run", "--toy",
                     "--epochs", 2, "--batch-size", 8, "--seed", 4)
    assert code == 0
    return manifest, tmp_path / "run"


def test_train_echoes_reproducible_config(trained, capsys, tmp_path):
    manifest, run_dir = trained
    cfg = json.loads((run_dir / "config.json").read_text())
    assert cfg["epochs"] == 2 and cfg["seed"] == 4 and cfg["model"]["img_size"] == 32
    code, _, _ = run(capsys, "train", "--manifest", manifest, "--out", tmp_path / "again",
                     "--config", run_dir / "config.json")
    assert code == 0
    assert (run_dir / "train_log.jsonl").read_bytes() == (tmp_path / "again/train_log.jsonl").read_bytes()
    assert (run_dir / "round0/final.ckpt").read_bytes() == (tmp_path / "again/round0/final.ckpt").read_bytes()


def test_flags_override_config_file(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"epochs": 9, "sgd": {"momentum": 0.5}}))
    args = cli.build_parser().parse_args(["train", "--manifest", "m", "--out", "o", "--config",
                                          str(tmp_path / "c.json"), "--epochs", "3", "--toy", "--no-fr"])
    cfg = cli.effective_train_config(args)
    assert cfg.epochs == 3 and cfg.sgd.momentum == 0.5 and not cfg.model.fr_enabled


def test_predict_eval_tsr_plot(trained, capsys, tmp_path):
    manifest, run_dir = trained
    ckpt = run_dir / "round0/final.ckpt"
    code, _, _ = run(capsys, "predict", "--checkpoint", ckpt, "--manifest", manifest, "--split", "all",
                     "--out", tmp_path / "pred")
    rows = [json.loads(x) for x in (tmp_path / "pred/predictions.jsonl").read_text().splitlines()]
    assert code == 0 and len(rows) == 36 and len(rows[0]["scores"]) == 4
    code, out, _ = run(capsys, "eval", "--checkpoint", ckpt, "--manifest", manifest, "--out", tmp_path / "ev")
    assert code == 0 and "macro AUC" in out
    for name in ("report.json", "roc.csv", "roc.svg", "predictions.jsonl"):
        assert (tmp_path / "ev" / name).exists()
    code, out, _ = run(capsys, "tsr", "--predictions", tmp_path / "pred/predictions.jsonl", "--out", tmp_path / "t")
    assert code in (0, 2)
    code, _, _ = run(capsys, "plot-roc", "--report", tmp_path / "ev/report.json", "--out", tmp_path / "plot")
    assert code == 0
    assert (tmp_path / "plot/roc.svg").read_bytes() == (tmp_path / "ev/roc.svg").read_bytes()


def test_eval_perfect_predictions(capsys, tmp_path):
    truth = [[1, 0, 0, 1], [0, 1, 0, 0], [0, 0, 1, 0], [1, 0, 1, 0], [0, 0, 0, 1], [1, 0, 0, 0]]
    with open(tmp_path / "p.jsonl", "w") as fh:
        for t in truth:
            fh.write(json.dumps({"scores": [float(v) for v in t], "labels": t}) + "\n")
    code, _, _ = run(capsys, "eval", "--predictions", tmp_path / "p.jsonl", "--out", tmp_path / "ev")
    assert code == 0
    report = json.loads((tmp_path / "ev/report.json").read_text())
    assert all(v == 1.0 for label in LABELS for v in report["metrics"][label].values())
    assert report["micro"]["auc"] == 1.0 and report["macro"]["auc"] == 1.0
    code, out, _ = run(capsys, "tsr", "--predictions", tmp_path / "p.jsonl")
    assert code == 0 and float(out) == pytest.approx(3 / 5)


def test_data_errors_exit_2(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--predictions", tmp_path / "missing.jsonl", "--out", tmp_path / "x")
    assert code == 2 and "data error" in err
    (tmp_path / "bad.jsonl").write_text("{not json}\n")
    code, _, _ = run(capsys, "tsr", "--predictions", tmp_path / "bad.jsonl")
    assert code == 2


def test_numeric_failure_exits_3(capsys, monkeypatch, tmp_path):
    from ldcsf.training import TrainingError

    def boom(*a, **k):
        raise TrainingError("non-finite value at round 0 step 5")

    monkeypatch.setattr(cli, "train", boom)
    code, _, err = run(capsys, "train", "--manifest", "m", "--out", tmp_path, "--toy")
    assert code == 3 and "step 5" in err


def test_gradcheck_layers(capsys, tmp_path):
    code, out, _ = run(capsys, "gradcheck", "--out", tmp_path)
    assert code == 0 and "all passed" in out and "window_attention" in out
    assert all(r["passed"] for r in json.loads((tmp_path / "gradcheck.json").read_text()))
