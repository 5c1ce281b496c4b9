"""Training loop: data -> model -> summed per-label loss -> SGD, with
checkpointing, per-epoch validation, resume, and the ablation toggles.

Every random draw (epoch shuffle, per-record augmentation, dropout) comes from
a generator keyed on ``(seed, round, epoch/step, record)``.  Runs are
therefore bit-reproducible, independent of data-loader parallelism, and a
resumed run continues exactly where the uninterrupted one would be.
"""

import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as dp
from .checkpoint import CheckpointError, load_checkpoint, load_model_state, model_state, save_checkpoint
from .metrics import MetricWarning, per_label_metrics
from .model import LABELS, LdcsfModel, ModelConfig, multilabel_loss, sigmoid_scores
from .optim import SGD, SgdConfig
from .tensor import NonFiniteError, Tensor, backward, make_rng, no_grad

log = logging.getLogger(__name__)

# Model fields whose change alters parameter shapes or the module set.
SHAPE_FIELDS = (
    "img_size", "patch_size", "embed_dim", "depths", "num_heads", "window_size",
    "mlp_ratio", "fr_reduction", "ldc_kernel", "ldc_expansion", "num_labels", "head_units",
)
TOGGLE_FIELDS = ("ldc_enabled", "fr_enabled")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 24
    sgd: SgdConfig = field(default_factory=SgdConfig)
    seed: int = 0
    rounds: list = field(default_factory=lambda: [0])
    model: ModelConfig = field(default_factory=ModelConfig)
    checkpoint_every: int = 0  # 0: final checkpoint only
    early_stop: int = None  # patience in epochs on validation L
    augment: bool = True
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.sgd, dict):
            self.sgd = SgdConfig(**self.sgd)
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.rounds = [int(r) for r in self.rounds]
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def round_seed(seed, round_):
    return int(make_rng(seed, "init", round_).integers(2**31 - 1))


def check_compatible(saved, requested):
    """Raise naming the first field that makes a resume unsafe."""
    for name in TOGGLE_FIELDS:
        if saved.get(name) != requested.get(name):
            raise CheckpointError(
                f"ablation toggle {name} differs: checkpoint={saved.get(name)}, requested={requested.get(name)}"
            )
    for name in SHAPE_FIELDS:
        if saved.get(name) != requested.get(name):
            raise CheckpointError(
                f"model config {name} differs: checkpoint={saved.get(name)}, requested={requested.get(name)}"
            )


class LogWriter:
    def __init__(self, path, append=False):
        self.path = Path(path)
        self.fh = open(self.path, "a" if append else "w", encoding="utf-8")

    def write(self, record):
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


@dataclass
class Dataset:
    """In-memory images (uint8 [H,W,3]) with multi-hot targets and stable ids."""

    images: list
    targets: np.ndarray
    ids: list

    def __len__(self):
        return len(self.images)


def load_split(records, manifest_path, round_, split, img_size):
    chosen = [(i, r) for i, r in enumerate(records) if r.splits.get(round_) == split]
    images = []
    for _, rec in chosen:
        img = dp.load_rgb(dp.resolve_path(rec, manifest_path))
        if img.shape[:2] != (img_size, img_size):
            raise dp.DataError(f"{rec.path}: tile is {img.shape[1]}x{img.shape[0]}, model expects {img_size}px")
        images.append(img)
    targets = np.array([r.labels for _, r in chosen], dtype=np.int64).reshape(-1, len(LABELS))
    return Dataset(images, targets, [i for i, _ in chosen])


class Trainer:
    """Owns one round's model, optimiser and step counter."""

    def __init__(self, cfg, round_=0, model=None):
        self.cfg = cfg
        self.round = round_
        self.model = model or LdcsfModel(cfg.model, seed=round_seed(cfg.seed, round_))
        self.optimizer = SGD(self.model.named_parameters(), cfg.sgd)
        self.step = 0
        self.epoch = 0  # epochs completed
        self.best_val = math.inf
        self.stale = 0

    # -- batches ----------------------------------------------------------------
    def _prepare(self, ds, idx, epoch, augment):
        def one(i):
            img = ds.images[i]
            if augment:
                img = dp.augment(img, make_rng(self.cfg.seed, "augment", self.round, epoch, ds.ids[i]))
            return img

        if self.cfg.workers > 1:
            with ThreadPoolExecutor(self.cfg.workers) as pool:
                imgs = list(pool.map(one, idx))
        else:
            imgs = [one(i) for i in idx]
        return dp.to_model_input(imgs), ds.targets[idx]

    def batches(self, n, epoch, shuffle=True):
        order = make_rng(self.cfg.seed, "shuffle", self.round, epoch).permutation(n) if shuffle else np.arange(n)
        b = self.cfg.batch_size
        return [order[i:i + b] for i in range(0, n, b)]

    # -- steps ------------------------------------------------------------------
    def train_step(self, x, y):
        self.model.train()
        self.model.reseed_dropout(self.round, self.step)
        self.optimizer.zero_grad()
        try:
            loss = multilabel_loss(self.model(Tensor(x)), y)
            backward(loss.total)
            self.optimizer.step()
        except NonFiniteError as err:
            raise TrainingError(f"non-finite value at round {self.round} step {self.step}: {err}") from err
        self.step += 1
        return loss

    def train_epoch(self, ds, writer=None):
        epoch = self.epoch
        records = []
        for idx in self.batches(len(ds), epoch):
            x, y = self._prepare(ds, idx, epoch, self.cfg.augment)
            loss = self.train_step(x, y)
            rec = {"kind": "step", "round": self.round, "epoch": epoch, "step": self.step - 1,
                   "batch": int(len(idx)), **loss.as_dict()}
            records.append(rec)
            if writer:
                writer.write(rec)
        self.epoch += 1
        return records

    def logits(self, ds, batch_size=None):
        """Eval-mode logits [N, 4] in float64."""
        self.model.eval()
        out = []
        b = batch_size or self.cfg.batch_size
        with no_grad():
            for i in range(0, len(ds), b):
                idx = np.arange(i, min(i + b, len(ds)))
                x, _ = self._prepare(ds, idx, 0, augment=False)
                out.append(self.model(Tensor(x)).data.astype(np.float64))
        return np.concatenate(out) if out else np.zeros((0, len(LABELS)))

    def predict(self, ds, batch_size=None):
        """Sigmoid scores [N, 4] in eval mode."""
        return sigmoid_scores(self.logits(ds, batch_size))

    def validate(self, ds):
        logits = self.logits(ds)
        with no_grad():
            loss = multilabel_loss(Tensor(logits), ds.targets)
        pred = (sigmoid_scores(logits) >= 0.5).astype(np.int64)
        with warnings.catch_warnings():
            # zero denominators are common early on; they are reported in the record
            warnings.simplefilter("ignore", MetricWarning)
            metrics, _, undefined = per_label_metrics(pred, ds.targets)
        return {"loss": loss.as_dict(), "metrics": metrics, "undefined": undefined}

    # -- persistence ------------------------------------------------------------
    def save(self, path):
        params, buffers = model_state(self.model)
        meta = {"round": self.round, "epoch": self.epoch, "step": self.step,
                "best_val": None if math.isinf(self.best_val) else self.best_val, "stale": self.stale}
        save_checkpoint(path, self.cfg.to_dict(), params, buffers, self.optimizer.state_dict(), meta)

    @classmethod
    def from_checkpoint(cls, path, cfg):
        ckpt = load_checkpoint(path)
        check_compatible(ckpt.config["model"], cfg.model.to_dict())
        round_ = int(ckpt.meta["round"])
        trainer = cls(cfg, round_)
        load_model_state(trainer.model, ckpt)
        trainer.optimizer.load_state_dict(ckpt.velocities)
        trainer.epoch = int(ckpt.meta["epoch"])
        trainer.step = int(ckpt.meta["step"])
        best = ckpt.meta.get("best_val")
        trainer.best_val = math.inf if best is None else float(best)
        trainer.stale = int(ckpt.meta.get("stale", 0))
        return trainer


def _fit_round(trainer, train_ds, val_ds, out_dir, writer):
    cfg = trainer.cfg
    rdir = Path(out_dir) / f"round{trainer.round}"
    rdir.mkdir(parents=True, exist_ok=True)
    last_val = None
    while trainer.epoch < cfg.epochs:
        trainer.train_epoch(train_ds, writer)
        last_val = trainer.validate(val_ds)
        writer.write({"kind": "val", "round": trainer.round, "epoch": trainer.epoch - 1, **last_val})
        val_l = last_val["loss"]["L"]
        if val_l < trainer.best_val:
            trainer.best_val, trainer.stale = val_l, 0
        else:
            trainer.stale += 1
        if cfg.checkpoint_every and trainer.epoch % cfg.checkpoint_every == 0:
            trainer.save(rdir / f"epoch{trainer.epoch:04d}.ckpt")
        if cfg.early_stop is not None and trainer.stale >= cfg.early_stop:
            log.info("round %d: early stop after epoch %d", trainer.round, trainer.epoch)
            break
    final = rdir / "final.ckpt"
    trainer.save(final)
    if last_val is None:
        last_val = trainer.validate(val_ds)
    return final, last_val


def _summarise(per_round):
    """Mean and population std of the final validation metrics across rounds."""
    summary = {"rounds": per_round, "mean": {}, "std": {}}
    if not per_round:
        return summary
    first = next(iter(per_round.values()))
    for label in first["metrics"]:
        summary["mean"][label], summary["std"][label] = {}, {}
        for key in first["metrics"][label]:
            vals = np.array([v["metrics"][label][key] for v in per_round.values()])
            summary["mean"][label][key] = float(vals.mean())
            summary["std"][label][key] = float(vals.std())
    losses = np.array([v["loss"]["L"] for v in per_round.values()])
    summary["mean"]["L"], summary["std"]["L"] = float(losses.mean()), float(losses.std())
    return summary


def train(manifest_path, cfg, out_dir, resume_from=None):
    """Run every requested round; returns ``{round: final checkpoint}`` and the summary.

    Writes ``train_log.jsonl`` (one JSON object per step / validation pass),
    per-round checkpoints and ``summary.json`` under ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = dp.read_manifest(manifest_path)
    resumed = Trainer.from_checkpoint(resume_from, cfg) if resume_from else None
    rounds = list(cfg.rounds)
    if resumed is not None:
        if resumed.round not in rounds:
            raise TrainingError(f"checkpoint round {resumed.round} is not among requested rounds {rounds}")
        rounds = rounds[rounds.index(resumed.round):]
    writer = LogWriter(out_dir / "train_log.jsonl", append=resumed is not None)
    finals, per_round = {}, {}
    try:
        for r in rounds:
            train_ds = load_split(records, manifest_path, r, "train", cfg.model.img_size)
            val_ds = load_split(records, manifest_path, r, "val", cfg.model.img_size)
            if len(train_ds) == 0 or len(val_ds) == 0:
                raise dp.DataError(f"round {r}: empty train or val split")
            trainer = resumed if (resumed is not None and resumed.round == r) else Trainer(cfg, r)
            finals[r], per_round[r] = _fit_round(trainer, train_ds, val_ds, out_dir, writer)
    finally:
        writer.close()
    summary = _summarise({str(k): v for k, v in per_round.items()})
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return finals, summary


def load_trained_model(path):
    """Rebuild a model from a checkpoint (eval mode) plus its train config."""
    ckpt = load_checkpoint(path)
    cfg = TrainConfig.from_dict(ckpt.config)
    model = LdcsfModel(cfg.model, seed=0)
    load_model_state(model, ckpt)
    return model.eval(), cfg
