"""Slide tiling, overlap labelling, class balancing, splits and augmentation.

Images are channel-last ``uint8`` arrays ``[H, W, 3]`` on the pipeline side;
:func:`to_model_input` converts a batch into the ``[N, 3, H, W]`` float layout
the network consumes.
"""

import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image

from .model import LABELS
from .tensor import get_default_dtype, make_rng

SPLITS = ("train", "val", "test")

# Label combinations reported in the dataset table, in its row order.
TABLE_COMBINATIONS = (
    ("interstitial_area",),
    ("interstitial_area", "non_tumor"),
    ("interstitial_area", "tumor"),
    ("necrosis",),
    ("non_tumor",),
    ("tumor",),
)


class DataError(ValueError):
    """Input data violates a pipeline precondition."""


# ------------------------------------------------------------------ labels


def labels_to_vector(names):
    unknown = set(names) - set(LABELS)
    if unknown:
        raise DataError(f"unknown label names {sorted(unknown)}; expected {LABELS}")
    return tuple(int(label in names) for label in LABELS)


def vector_to_labels(bits):
    return [label for label, bit in zip(LABELS, bits) if bit]


def combination_name(bits):
    return " & ".join(vector_to_labels(bits)) or "(none)"


@dataclass
class TileRecord:
    path: str
    x: int
    y: int
    labels: tuple
    splits: dict = field(default_factory=dict)  # round -> split name

    def __post_init__(self):
        self.labels = tuple(int(b) for b in self.labels)
        if len(self.labels) != len(LABELS) or not set(self.labels) <= {0, 1}:
            raise DataError(f"label vector must be 4 bits, got {self.labels}")
        if not any(self.labels):
            raise DataError(f"tile {self.path} has no label set")

    def to_json(self):
        return {
            "path": self.path,
            "x": self.x,
            "y": self.y,
            "labels": vector_to_labels(self.labels),
            "splits": [{"round": r, "split": s} for r, s in sorted(self.splits.items())],
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            path=obj["path"],
            x=int(obj["x"]),
            y=int(obj["y"]),
            labels=labels_to_vector(obj["labels"]),
            splits={int(s["round"]): s["split"] for s in obj.get("splits", [])},
        )


def write_manifest(records, path):
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def read_manifest(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(TileRecord.from_json(json.loads(line)))
            except (KeyError, json.JSONDecodeError) as err:
                raise DataError(f"{path}:{lineno}: malformed manifest line ({err})") from None
    return records


def resolve_path(record, manifest_path):
    p = Path(record.path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


# ------------------------------------------------------------------ tiling


def patchify(slide, tile=224, stride=224):
    """Yield ``(tile_image, (x, y))`` over a regular grid; remainders are dropped."""
    slide = np.asarray(slide)
    h, w = slide.shape[:2]
    if h < tile or w < tile:
        raise DataError(f"slide {w}x{h} is smaller than the {tile}px tile")
    tiles = []
    for y in range(0, h - tile + 1, stride):
        for x in range(0, w - tile + 1, stride):
            tiles.append((slide[y:y + tile, x:x + tile], (x, y)))
    return tiles


def tile_grid_shape(h, w, tile=224, stride=224):
    return (h - tile) // stride + 1, (w - tile) // stride + 1


def assign_labels(origin, masks, tile=224, tau=0.05):
    """Multi-hot vector: bit set iff mask coverage of the tile is >= tau.

    ``masks`` is a mapping label name -> boolean [H, W] array (missing labels
    count as empty) or a [4, H, W] array in label order.
    """
    x, y = origin
    bits = []
    for i, label in enumerate(LABELS):
        if isinstance(masks, dict):
            mask = masks.get(label)
        else:
            mask = masks[i]
        if mask is None:
            bits.append(0)
            continue
        window = mask[y:y + tile, x:x + tile]
        if window.shape != (tile, tile):
            raise DataError(f"tile at {origin} falls outside mask {label}")
        bits.append(int(window.mean() >= tau))
    return tuple(bits)


def balance(records, max_ratio=3, seed=0):
    """Subsample over-represented label combinations to a max/min ratio.

    Each combination is capped at ``floor(max_ratio * smallest count)``; the
    kept subset is a seeded draw, returned in the original record order.
    """
    if not records:
        raise DataError("balance() needs at least one record")
    groups = {}
    for i, rec in enumerate(records):
        groups.setdefault(rec.labels, []).append(i)
    smallest = min(len(v) for v in groups.values())
    cap = math.floor(max_ratio * smallest)
    keep = set()
    for combo, idx in sorted(groups.items()):
        if len(idx) <= cap:
            keep.update(idx)
            continue
        rng = make_rng(seed, "balance", *combo)
        keep.update(int(i) for i in rng.choice(idx, size=cap, replace=False))
    return [rec for i, rec in enumerate(records) if i in keep]


def combination_counts(records, round_=None, split=None):
    counts = Counter()
    for rec in records:
        if split is not None and rec.splits.get(round_) != split:
            continue
        counts[rec.labels] += 1
    return counts


def make_splits(records, rounds=10, fractions=(0.7, 0.1, 0.2), seed=0):
    """Assign train/val/test per round by an independent seeded shuffle.

    val and test sizes are ``floor(n * fraction)``; train takes the rest.
    """
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise DataError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    n = len(records)
    if n < 10:
        raise DataError(f"need at least 10 records to split, got {n}")
    n_val = math.floor(n * fractions[1] + 1e-9)
    n_test = math.floor(n * fractions[2] + 1e-9)
    for r in range(rounds):
        order = make_rng(seed, "split", r).permutation(n)
        for pos, i in enumerate(order):
            if pos < n_val:
                split = "val"
            elif pos < n_val + n_test:
                split = "test"
            else:
                split = "train"
            records[i].splits[r] = split
    return records


# ------------------------------------------------------------ augmentation


def flip(img, axis):
    """Mirror an [H, W, C] image; ``axis`` is 'horizontal' or 'vertical'."""
    if axis == "horizontal":
        return img[:, ::-1].copy()
    if axis == "vertical":
        return img[::-1].copy()
    raise ValueError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")


def adjust_hsv(img, hue_shift=0.0, sat_scale=1.0, val_scale=1.0):
    """Deterministic HSV perturbation of an 8-bit RGB image.

    Hue is a fraction of the circle and wraps; saturation and value are
    scaled and clamped to [0, 1].
    """
    hsv = rgb_to_hsv(np.asarray(img, dtype=np.float64) / 255.0)
    hsv[..., 0] = np.mod(hsv[..., 0] + hue_shift, 1.0)
    hsv[..., 1] = np.clip(hsv[..., 1] * sat_scale, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * val_scale, 0.0, 1.0)
    return np.clip(np.rint(hsv_to_rgb(hsv) * 255.0), 0, 255).astype(np.uint8)


@dataclass
class HsvBounds:
    hue_delta: float = 0.015
    sat_range: tuple = (0.6, 1.4)
    val_range: tuple = (0.6, 1.4)


def random_hsv(img, rng, bounds=None):
    bounds = bounds or HsvBounds()
    hue = rng.uniform(-bounds.hue_delta, bounds.hue_delta)
    sat = rng.uniform(*bounds.sat_range)
    val = rng.uniform(*bounds.val_range)
    return adjust_hsv(img, hue, sat, val)


def augment(img, rng, bounds=None):
    """Random horizontal/vertical flips (p=0.5 each) then HSV jitter."""
    if rng.random() < 0.5:
        img = flip(img, "horizontal")
    if rng.random() < 0.5:
        img = flip(img, "vertical")
    return random_hsv(img, rng, bounds)


# ----------------------------------------------------------------- image io


def load_rgb(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_rgb(arr, path):
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="RGB").save(path)


def load_mask(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def to_model_input(images):
    """List of [H,W,3] uint8 -> float [N,3,H,W] scaled to [0, 1]."""
    batch = np.stack([np.asarray(im) for im in images]).astype(get_default_dtype())
    return np.ascontiguousarray(batch.transpose(0, 3, 1, 2)) / get_default_dtype().type(255.0)


# ------------------------------------------------------------ slide ingest


def tile_slide(slide, masks, out_dir, tile=224, tau=0.05, balance_ratio=3, seed=0,
               prefix="tile", workers=1):
    """Tile ``slide``, label each tile, drop unlabelled ones, balance, write PNGs.

    Returns the kept :class:`TileRecord` list with paths relative to
    ``out_dir``.
    """
    out_dir = Path(out_dir)
    (out_dir / "tiles").mkdir(parents=True, exist_ok=True)
    h, w = np.asarray(slide).shape[:2]
    for label, mask in masks.items():
        if mask.shape != (h, w):
            raise DataError(f"mask {label} is {mask.shape[::-1]}, slide is {w}x{h}")
    records, tiles = [], {}
    for img, (x, y) in patchify(slide, tile, tile):
        bits = assign_labels((x, y), masks, tile, tau)
        if not any(bits):
            continue
        rel = f"tiles/{prefix}_{y:06d}_{x:06d}.png"
        records.append(TileRecord(rel, x, y, bits))
        tiles[rel] = img
    if not records:
        raise DataError("no tile reached the label coverage threshold")
    records = balance(records, balance_ratio, seed)

    def _write(rec):
        save_rgb(tiles[rec.path], out_dir / rec.path)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(_write, records))
    else:
        for rec in records:
            _write(rec)
    return records


# ---------------------------------------------------------- synthetic data


_TISSUE_COLOURS = {
    "interstitial_area": (236, 190, 214),
    "necrosis": (214, 120, 150),
    "non_tumor": (150, 60, 140),
    "tumor": (90, 40, 120),
}
_TISSUE_FREQ = {"interstitial_area": 1, "necrosis": 0, "non_tumor": 3, "tumor": 6}


def texture(label, size, rng):
    """A solid-colour stain with a label-specific stripe frequency and noise."""
    base = np.array(_TISSUE_COLOURS[label], dtype=np.float64)
    yy, xx = np.mgrid[0:size, 0:size]
    freq = _TISSUE_FREQ[label]
    pattern = np.sin(2 * np.pi * freq * (xx + yy) / size)[..., None] * 25.0
    noise = rng.normal(0.0, 6.0, size=(size, size, 3))
    return np.clip(base + pattern + noise, 0, 255).astype(np.uint8)


def synthetic_tile(labels, size, rng):
    """One tile for a 1- or 2-label combination; duals are split down the middle."""
    names = list(labels)
    if len(names) == 1:
        return texture(names[0], size, rng)
    left, right = texture(names[0], size, rng), texture(names[1], size, rng)
    out = left.copy()
    out[:, size // 2:] = right[:, size // 2:]
    return out


def synthetic_tiles(count, size, seed=0):
    """``count`` tiles cycling through the six dataset label combinations."""
    rng = make_rng(seed, "synthetic")
    images, vectors = [], []
    for i in range(count):
        combo = TABLE_COMBINATIONS[i % len(TABLE_COMBINATIONS)]
        images.append(synthetic_tile(combo, size, rng))
        vectors.append(labels_to_vector(combo))
    return images, np.array(vectors, dtype=np.int64)


def write_synthetic_dataset(out_dir, count, size, seed=0, rounds=1, fractions=(0.7, 0.1, 0.2)):
    """Write tiles + manifest for a synthetic dataset; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "tiles").mkdir(parents=True, exist_ok=True)
    images, vectors = synthetic_tiles(count, size, seed)
    records = []
    for i, (img, bits) in enumerate(zip(images, vectors)):
        rel = f"tiles/synth_{i:05d}.png"
        save_rgb(img, out_dir / rel)
        records.append(TileRecord(rel, i * size, 0, tuple(bits)))
    make_splits(records, rounds, fractions, seed)
    manifest = out_dir / "manifest.jsonl"
    write_manifest(records, manifest)
    return manifest


def demo_slide(size=1792, tile=224, seed=0):
    """A synthetic slide plus four region masks with overlapping borders.

    The slide is divided into vertical bands (interstitial, necrosis,
    non-tumour, tumour); an interstitial strip across the top of the
    non-tumour and tumour bands yields the dual-label combinations.
    """
    rng = make_rng(seed, "demo-slide")
    slide = np.zeros((size, size, 3), dtype=np.uint8)
    masks = {label: np.zeros((size, size), dtype=bool) for label in LABELS}
    cols = (np.arange(5) * (size // tile // 4)) * tile
    cols[-1] = size
    for i, label in enumerate(LABELS):
        lo, hi = cols[i], cols[i + 1]
        masks[label][:, lo:hi] = True
        slide[:, lo:hi] = texture(label, size, rng)[:, lo:hi]
    strip = slice(0, tile + tile // 2)
    masks["interstitial_area"][strip, cols[2]:] = True
    return slide, masks


def cpu_workers(requested):
    if requested and requested > 0:
        return int(requested)
    return max(1, min(4, os.cpu_count() or 1))
