"""``ldcsf`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure
(non-finite values or a failed gradient check).  Every artifact goes under
``--out``.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as dp
from .attention import wmsa_complexity
from .checkpoint import CheckpointError
from .metrics import EvalReport, UndefinedMetricError, binarize, evaluate, tumor_stroma_ratio
from .model import LABELS, ModelConfig
from .plotting import write_roc_csv, write_roc_svg
from .tensor import NonFiniteError
from .training import Trainer, TrainConfig, TrainingError, load_split, load_trained_model, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("ldcsf")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dump(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fractions(text):
    try:
        parts = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("fractions are train,val,test")
    return parts


def _print_counts(counts, stream=None):
    stream = stream or sys.stdout
    total = sum(counts.values())
    for bits, n in sorted(counts.items(), key=lambda kv: (-sum(kv[0]), kv[0])):
        print(f"{dp.combination_name(bits):<36} {n:>6}", file=stream)
    print(f"{'total':<36} {total:>6}", file=stream)


# ------------------------------------------------------------------ patchify


def _parse_masks(items):
    masks = {}
    for item in items or []:
        label, sep, path = item.partition("=")
        if not sep or label not in LABELS:
            raise UsageError(f"--masks entries are LABEL=PATH with LABEL in {LABELS}, got {item!r}")
        masks[label] = dp.load_mask(path)
    missing = set(LABELS) - set(masks)
    if missing:
        raise UsageError(f"missing masks for {sorted(missing)}")
    return masks


def cmd_patchify(args):
    if args.demo:
        slide, masks = dp.demo_slide(tile=args.tile, seed=args.seed)
    elif args.slide:
        slide, masks = dp.load_rgb(args.slide), _parse_masks(args.masks)
    else:
        raise UsageError("patchify needs --slide with --masks, or --demo")
    out = _out_dir(args)
    records = dp.tile_slide(slide, masks, out, tile=args.tile, tau=args.tau,
                            balance_ratio=args.balance_ratio, seed=args.seed,
                            workers=dp.cpu_workers(args.workers))
    dp.write_manifest(records, out / "manifest.jsonl")
    _print_counts(dp.combination_counts(records))
    return EXIT_OK


def cmd_splits(args):
    records = dp.read_manifest(args.manifest)
    out = _out_dir(args)
    target = out / "manifest.jsonl"
    src_dir = Path(args.manifest).resolve().parent
    for rec in records:
        if not Path(rec.path).is_absolute():
            rec.path = os.path.relpath(src_dir / rec.path, target.resolve().parent)
    dp.make_splits(records, args.rounds, args.fractions, args.seed)
    dp.write_manifest(records, target)
    for split in ("train", "val", "test"):
        print(f"round 0 {split}:")
        _print_counts(dp.combination_counts(records, 0, split))
    return EXIT_OK


def cmd_synth(args):
    out = _out_dir(args)
    manifest = dp.write_synthetic_dataset(out, args.count, args.size, args.seed, args.rounds, args.fractions)
    _print_counts(dp.combination_counts(dp.read_manifest(manifest)))
    return EXIT_OK


# --------------------------------------------------------------------- train


def effective_train_config(args):
    """Config file values, then command-line overrides."""
    base = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            base = json.load(fh)
    model = dict(base.pop("model", {}) or {})
    if args.toy:
        model = {**ModelConfig.toy().to_dict(), **model}
    sgd = dict(base.pop("sgd", {}) or {})
    for flag, key in (("lr", "learning_rate"), ("momentum", "momentum"), ("weight_decay", "weight_decay")):
        if getattr(args, flag) is not None:
            sgd[key] = getattr(args, flag)
    for flag in ("epochs", "batch_size", "seed", "checkpoint_every", "early_stop", "workers"):
        if getattr(args, flag) is not None:
            base[flag] = getattr(args, flag)
    if args.rounds is not None:
        base["rounds"] = list(range(args.rounds))
    if args.no_augment:
        base["augment"] = False
    if args.no_ldc:
        model["ldc_enabled"] = False
    if args.no_fr:
        model["fr_enabled"] = False
    if args.dropout is not None:
        model["dropout_rate"] = args.dropout
    cfg = TrainConfig.from_dict({**base, "model": model, "sgd": sgd})
    cfg.model.validate()
    return cfg


def cmd_train(args):
    cfg = effective_train_config(args)
    out = _out_dir(args)
    _dump(cfg.to_dict(), out / "config.json")
    finals, summary = train(args.manifest, cfg, out, resume_from=args.resume)
    for r, path in finals.items():
        print(f"round {r}: {path}")
    print(f"mean validation L: {summary['mean'].get('L', float('nan')):.6f}")
    return EXIT_OK


# -------------------------------------------------------- predict / eval / tsr


def _predict_records(checkpoint, manifest, split, round_):
    model, cfg = load_trained_model(checkpoint)
    records = dp.read_manifest(manifest)
    if split == "all":
        for rec in records:
            rec.splits[round_] = "all"
    chosen = [rec for rec in records if rec.splits.get(round_) == split]
    ds = load_split(records, manifest, round_, split, cfg.model.img_size)
    if len(ds) == 0:
        raise dp.DataError(f"no tiles in split {split!r} for round {round_}")
    scores = Trainer(cfg, round_, model=model).predict(ds)
    return [
        {"path": rec.path, "x": rec.x, "y": rec.y, "labels": [int(b) for b in rec.labels],
         "scores": [float(s) for s in row]}
        for rec, row in zip(chosen, scores)
    ]


def _read_predictions(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                rows.append((row["scores"], row.get("labels")))
            except (KeyError, json.JSONDecodeError) as err:
                raise dp.DataError(f"{path}:{lineno}: malformed prediction line ({err})") from None
    if not rows:
        raise dp.DataError(f"{path}: no predictions")
    scores = np.array([r[0] for r in rows], dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] != len(LABELS):
        raise dp.DataError(f"{path}: scores must have {len(LABELS)} entries per line")
    truth = None if any(r[1] is None for r in rows) else np.array([r[1] for r in rows], dtype=np.int64)
    return scores, truth


def _write_predictions(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def cmd_predict(args):
    out = _out_dir(args)
    rows = _predict_records(args.checkpoint, args.manifest, args.split, args.round)
    _write_predictions(rows, out / "predictions.jsonl")
    print(f"{len(rows)} predictions -> {out / 'predictions.jsonl'}")
    return EXIT_OK


def cmd_eval(args):
    out = _out_dir(args)
    if args.predictions:
        scores, truth = _read_predictions(args.predictions)
    elif args.checkpoint and args.manifest:
        rows = _predict_records(args.checkpoint, args.manifest, args.split, args.round)
        _write_predictions(rows, out / "predictions.jsonl")
        scores = np.array([r["scores"] for r in rows])
        truth = np.array([r["labels"] for r in rows], dtype=np.int64)
    else:
        raise UsageError("eval needs --predictions, or --checkpoint with --manifest")
    if truth is None:
        raise dp.DataError("predictions carry no ground-truth labels")
    report = evaluate(scores, truth, args.threshold)
    _dump(report.to_dict(), out / "report.json")
    write_roc_csv(report, out / "roc.csv")
    write_roc_svg(report, out / "roc.svg")
    print(f"{'label':<20} {'accuracy':>9} {'precision':>9} {'recall':>9} {'f1':>9} {'auc':>9}")
    for label in LABELS:
        m = report.metrics[label]
        auc = report.roc[label].auc if label in report.roc else float("nan")
        print(f"{label:<20} {m['accuracy']:>9.4f} {m['precision']:>9.4f} {m['recall']:>9.4f} "
              f"{m['f1']:>9.4f} {auc:>9.4f}")
    print(f"subset accuracy {report.subset_accuracy:.4f}  micro AUC {report.micro.auc:.4f}  "
          f"macro AUC {report.macro.auc:.4f}")
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def cmd_tsr(args):
    scores, _ = _read_predictions(args.predictions)
    ratio = tumor_stroma_ratio(binarize(scores, args.threshold), inverse=args.inverse)
    print(f"{ratio:.6f}")
    if args.out:
        _dump({"tsr": ratio, "inverse": args.inverse, "threshold": args.threshold, "tiles": len(scores)},
              _out_dir(args) / "tsr.json")
    return EXIT_OK


def cmd_plot_roc(args):
    with open(args.report, encoding="utf-8") as fh:
        report = EvalReport.from_dict(json.load(fh))
    out = _out_dir(args)
    write_roc_csv(report, out / "roc.csv")
    write_roc_svg(report, out / "roc.svg", title=args.title)
    print(out / "roc.svg")
    return EXIT_OK


# ------------------------------------------------------------ checks / misc


def cmd_gradcheck(args):
    from .gradcheck import run_suite

    results = run_suite(seed=args.seed, model_samples=args.samples, include_model=args.toy)
    print(f"{'case':<22} {'n':>6} {'skip':>4} {'max rel err':>12}  status")
    for r in results:
        print(r.row())
    ok = all(r.passed for r in results)
    if args.out:
        _dump([{"name": r.name, "checked": r.checked, "skipped": r.skipped,
                "max_rel_error": r.max_rel_error, "passed": r.passed} for r in results],
              _out_dir(args) / "gradcheck.json")
    print("all passed" if ok else "FAILED")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_flops(args):
    print(wmsa_complexity(args.h, args.w, args.c, args.m))
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser():
    parser = _Parser(prog="ldcsf", description="LDCSF multi-label histopathology tile classifier")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("patchify", help="tile a slide and assign labels from region masks")
    p.add_argument("--slide", help="RGB slide image")
    p.add_argument("--masks", nargs="+", metavar="LABEL=PATH", help="one binary mask per label")
    p.add_argument("--demo", action="store_true", help="use the built-in synthetic slide")
    p.add_argument("--out", required=True)
    p.add_argument("--tile", type=int, default=224)
    p.add_argument("--tau", type=float, default=0.05, help="minimum label coverage per tile")
    p.add_argument("--balance-ratio", type=float, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_patchify)

    p = sub.add_parser("splits", help="assign train/val/test splits for each round")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--fractions", type=_fractions, default=(0.7, 0.1, 0.2), metavar="TRAIN,VAL,TEST")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_splits)

    p = sub.add_parser("synth", help="write a synthetic labelled tile set with splits")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=60)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--fractions", type=_fractions, default=(0.7, 0.1, 0.2), metavar="TRAIN,VAL,TEST")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train one model per split round")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON train config; flags override its values")
    p.add_argument("--toy", action="store_true", help="start from the desk-scale model config")
    p.add_argument("--resume", metavar="CKPT")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--rounds", type=int, help="train rounds 0..N-1")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--early-stop", type=int, metavar="PATIENCE")
    p.add_argument("--dropout", type=float)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--no-ldc", action="store_true")
    p.add_argument("--no-fr", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(fn=cmd_train)

    def _model_inputs(p):
        p.add_argument("--checkpoint")
        p.add_argument("--manifest")
        p.add_argument("--split", default="test", help="train, val, test or all")
        p.add_argument("--round", type=int, default=0)

    p = sub.add_parser("predict", help="write per-tile sigmoid scores as JSON lines")
    _model_inputs(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("eval", help="per-label metrics, ROC curves and report")
    _model_inputs(p)
    p.add_argument("--predictions", help="predictions JSONL (with labels) instead of a checkpoint")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("tsr", help="tumour-stroma ratio from tile predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--inverse", action="store_true", help="report the tumour share instead")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_tsr)

    p = sub.add_parser("plot-roc", help="render ROC curves from a saved report")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--title", default="ROC curves")
    p.set_defaults(fn=cmd_plot_roc)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--toy", action="store_true", help="include the end-to-end toy model")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("flops", help="window-attention cost 4hwC^2 + 2M^2hwC")
    for name in ("h", "w", "c", "m"):
        p.add_argument(f"--{name}", type=int, required=True)
    p.set_defaults(fn=cmd_flops)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as err:
        print(f"ldcsf {args.command}: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (dp.DataError, CheckpointError, UndefinedMetricError, FileNotFoundError,
            json.JSONDecodeError, OSError) as err:
        print(f"ldcsf {args.command}: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, NonFiniteError, FloatingPointError) as err:
        print(f"ldcsf {args.command}: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:
        print(f"ldcsf {args.command}: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
