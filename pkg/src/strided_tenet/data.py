"""Image/mask ingestion, dataset manifests, synthetic-shapes generation, and
overlay rendering.

Raster decoding and encoding go through Pillow. Grayscale intensities are
divided by the bit-depth maximum, color is reduced to Rec.709 luminance,
masks binarize as nonzero -> 1. A manifest is a JSON file naming the
train/val/test splits as (image, mask) path pairs relative to a root.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DomainError, FormatError, ShapeError

__all__ = [
    "SPLIT_NAMES",
    "DatasetManifest",
    "SynthConfig",
    "load_image",
    "load_mask",
    "load_pairs",
    "load_manifest",
    "write_manifest",
    "generate_synthetic",
    "write_soft_png",
    "write_mask_png",
    "render_overlay",
]

SPLIT_NAMES = ("train", "val", "test")

LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])

OVERLAY_TRUE_POSITIVE = (0, 255, 0)      # green
OVERLAY_FALSE_NEGATIVE = (128, 128, 128)  # grey
OVERLAY_FALSE_POSITIVE = (255, 105, 180)  # pink


def _open_raster(path):
    try:
        with Image.open(path) as im:
            im.load()
            return im.mode, np.array(im)
    except FileNotFoundError:
        raise
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not a decodable raster file") from exc
    except OSError as exc:
        raise FormatError(f"{path}: unreadable ({exc})") from exc


def load_image(path, normalize="bitdepth"):
    """Decode a raster file to an H x W float64 image in [0, 1].

    8/16-bit grayscale divides by the bit-depth maximum; RGB(A) and palette
    images are reduced to luminance first. ``normalize="minmax"`` rescales
    each image to span [0, 1] instead (changes the learning problem, so it
    is opt-in).
    """
    mode, arr = _open_raster(path)
    if mode == "1":
        img = arr.astype(np.float64)
    elif mode == "L":
        img = arr.astype(np.float64) / 255.0
    elif mode in ("I", "I;16"):
        img = arr.astype(np.float64) / 65535.0
    elif mode == "LA":
        img = arr[:, :, 0].astype(np.float64) / 255.0
    elif mode in ("RGB", "RGBA"):
        img = arr[:, :, :3].astype(np.float64) / 255.0 @ LUMA_WEIGHTS
    elif mode == "P":
        with Image.open(path) as im:
            arr = np.array(im.convert("RGB"))
        img = arr.astype(np.float64) / 255.0 @ LUMA_WEIGHTS
    else:
        raise FormatError(f"{path}: unsupported raster mode {mode!r}")
    if normalize == "minmax":
        lo, hi = img.min(), img.max()
        img = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    elif normalize != "bitdepth":
        raise DomainError(f"unknown normalization {normalize!r}")
    return np.clip(img, 0.0, 1.0)


def load_mask(path):
    """Decode a raster file to a {0, 1} uint8 mask; any nonzero pixel is 1."""
    _, arr = _open_raster(path)
    if arr.ndim == 3:
        arr = arr[:, :, :3].max(axis=2)
    return (arr != 0).astype(np.uint8)


def write_soft_png(path, probs):
    """Store probabilities in [0, 1] as a 16-bit grayscale PNG."""
    probs = np.asarray(probs, dtype=np.float64)
    values = np.rint(np.clip(probs, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(values).save(path)


def write_mask_png(path, mask):
    values = (np.asarray(mask) != 0).astype(np.uint8) * 255
    Image.fromarray(values, mode="L").save(path)


def render_overlay(img, pred, target, path):
    """Color-coded prediction quality: green TP, grey FN, pink FP, input elsewhere."""
    img = np.asarray(img, dtype=np.float64)
    pred = np.asarray(pred).astype(bool)
    target = np.asarray(target).astype(bool)
    if img.shape != pred.shape or img.shape != target.shape:
        raise ShapeError(
            f"image {img.shape}, prediction {pred.shape} and target {target.shape} differ"
        )
    base = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    rgb = np.stack([base, base, base], axis=2)
    rgb[pred & target] = OVERLAY_TRUE_POSITIVE
    rgb[~pred & target] = OVERLAY_FALSE_NEGATIVE
    rgb[pred & ~target] = OVERLAY_FALSE_POSITIVE
    Image.fromarray(rgb, mode="RGB").save(path)
    return Path(path)


@dataclass
class DatasetManifest:
    """Named splits of (image path, mask path) pairs under a root directory."""

    root: Path
    splits: dict = field(default_factory=dict)

    def pairs(self, split):
        if split not in self.splits:
            raise DomainError(f"unknown split {split!r}; have {sorted(self.splits)}")
        return [(self.root / img, self.root / msk) for img, msk in self.splits[split]]


def write_manifest(manifest, path):
    path = Path(path)
    payload = {"root": Path(manifest.root).as_posix()}
    try:
        rel = Path(manifest.root).resolve().relative_to(path.resolve().parent)
        payload["root"] = rel.as_posix()
    except ValueError:
        pass
    for name in SPLIT_NAMES:
        payload[name] = [
            {"image": str(img), "mask": str(msk)}
            for img, msk in manifest.splits.get(name, [])
        ]
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def load_manifest(path, check_files=True):
    """Parse and validate a manifest JSON file.

    A pair may not appear in two splits; with ``check_files`` every
    referenced file must exist.
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid manifest JSON ({exc})") from exc
    if not isinstance(payload, dict) or "root" not in payload:
        raise FormatError(f"{path}: manifest must be an object with a 'root' key")
    root = (path.parent / payload["root"]).resolve()
    splits = {}
    seen = {}
    for name in SPLIT_NAMES:
        pairs = []
        for entry in payload.get(name, []):
            if not isinstance(entry, dict) or "image" not in entry or "mask" not in entry:
                raise FormatError(f"{path}: split {name!r} entry needs image and mask keys")
            pair = (entry["image"], entry["mask"])
            if pair in seen and seen[pair] != name:
                raise FormatError(
                    f"{path}: pair {pair} appears in both {seen[pair]!r} and {name!r}"
                )
            seen[pair] = name
            pairs.append(pair)
        splits[name] = pairs
    manifest = DatasetManifest(root=root, splits=splits)
    if check_files:
        missing = [
            str(p)
            for name in SPLIT_NAMES
            for img, msk in manifest.pairs(name)
            for p in (img, msk)
            if not p.exists()
        ]
        if missing:
            raise FileNotFoundError(
                f"{path}: {len(missing)} referenced files missing, first: {missing[0]}"
            )
    return manifest


def load_pairs(manifest, split, normalize="bitdepth"):
    """Load a split into memory as (image, mask) array pairs."""
    out = []
    for img_path, msk_path in manifest.pairs(split):
        img = load_image(img_path, normalize=normalize)
        msk = load_mask(msk_path)
        if img.shape != msk.shape:
            raise ShapeError(
                f"{img_path} is {img.shape} but its mask {msk_path} is {msk.shape}"
            )
        out.append((img, msk))
    return out


@dataclass
class SynthConfig:
    """Bright-shapes-on-dark-background dataset, sized for desk-scale runs.

    Intensities are snapped to the 16-bit grid during generation so the
    on-disk PNGs reproduce the in-memory values exactly.
    """

    image_size: int = 64
    train_count: int = 200
    val_count: int = 50
    test_count: int = 50
    shapes: tuple = ("rectangle", "disc")
    fg_range: tuple = (0.70, 0.95)
    bg_range: tuple = (0.05, 0.30)
    noise_std: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 8:
            raise DomainError(f"image_size must be >= 8, got {self.image_size}")
        for name, (lo, hi) in (("fg_range", self.fg_range), ("bg_range", self.bg_range)):
            if not (0.0 <= lo <= hi <= 1.0):
                raise DomainError(f"{name} must satisfy 0 <= lo <= hi <= 1, got {(lo, hi)}")
        if self.noise_std < 0:
            raise DomainError(f"noise_std must be >= 0, got {self.noise_std}")
        for kind in self.shapes:
            if kind not in ("rectangle", "disc"):
                raise DomainError(f"unknown shape kind {kind!r}")
        if not self.shapes:
            raise DomainError("at least one shape kind is required")

    def counts(self):
        return {"train": self.train_count, "val": self.val_count, "test": self.test_count}


def _snap16(value):
    return np.rint(np.asarray(value) * 65535.0) / 65535.0


def _scene(rng, cfg):
    size = cfg.image_size
    img = np.full((size, size), float(_snap16(rng.uniform(*cfg.bg_range))))
    mask = np.zeros((size, size), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(1, 4))):  # 1..3 shapes
        kind = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
        fg = float(_snap16(rng.uniform(*cfg.fg_range)))
        if kind == "rectangle":
            lo, hi = max(2, size // 8), max(3, size // 3)
            h = int(rng.integers(lo, hi + 1))
            w = int(rng.integers(lo, hi + 1))
            y0 = int(rng.integers(0, size - h + 1))
            x0 = int(rng.integers(0, size - w + 1))
            support = np.zeros_like(mask, dtype=bool)
            support[y0 : y0 + h, x0 : x0 + w] = True
        else:
            lo, hi = max(2, size // 10), max(3, size // 4)
            r = int(rng.integers(lo, hi + 1))
            cy = int(rng.integers(r, size - r))
            cx = int(rng.integers(r, size - r))
            support = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[support] = fg
        mask[support] = 1
    # drawn unconditionally so the geometry stream is independent of noise_std
    noise = rng.normal(0.0, 1.0, size=img.shape) * cfg.noise_std
    img = _snap16(np.clip(img + noise, 0.0, 1.0))
    return img, mask


def generate_synthetic(cfg, out_dir):
    """Write a seeded synthetic dataset (16-bit images, 8-bit masks, manifest).

    Deterministic: the same config regenerates byte-identical files. Masks
    are the exact noiseless shape support.
    """
    out = Path(out_dir)
    rng = np.random.default_rng(cfg.seed)
    splits = {}
    for split, count in cfg.counts().items():
        (out / split).mkdir(parents=True, exist_ok=True)
        pairs = []
        for idx in range(count):
            img, mask = _scene(rng, cfg)
            img_rel = f"{split}/img_{idx:03d}.png"
            msk_rel = f"{split}/mask_{idx:03d}.png"
            write_soft_png(out / img_rel, img)
            write_mask_png(out / msk_rel, mask)
            pairs.append((img_rel, msk_rel))
        splits[split] = pairs
    manifest = DatasetManifest(root=out.resolve(), splits=splits)
    write_manifest(manifest, out / "manifest.json")
    return manifest
