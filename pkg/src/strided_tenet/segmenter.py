"""Non-overlapping patch extraction, prediction tiling, and whole-image
segmentation with a shared MPS model.

The stride equals the patch side, so patches tile the image exactly: one
model evaluation per patch, logits mapped through the logistic function,
and the per-patch probability squares placed back where their pixels came
from. Patches are independent, so edits inside one patch can only change
that patch's output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DomainError, ShapeError, StateError
from .features import get_feature_map
from .mps import forward

__all__ = ["PatchBatch", "extract_patches", "tile_predictions", "segment_image"]


@dataclass
class PatchBatch:
    """B x K**2 intensity rows in row-major patch-grid order."""

    patches: np.ndarray
    grid_rows: int
    grid_cols: int
    height: int
    width: int
    stride: int


def extract_patches(img, stride):
    """Split an H x W image into non-overlapping stride x stride patches.

    Patch (i, j) holds rows i*K .. i*K+K-1 and cols j*K .. j*K+K-1 flattened
    row-major; the batch itself is row-major over the patch grid. H and W
    must be multiples of the stride.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"image must be 2-D, got ndim {img.ndim}")
    h, w = img.shape
    k = int(stride)
    if k < 1:
        raise DomainError(f"stride must be >= 1, got {stride}")
    if h % k or w % k:
        raise ShapeError(
            f"image dims H={h}, W={w} not divisible by stride K={k} "
            f"(use reflect padding or crop)"
        )
    ok = np.isfinite(img) & (img >= 0.0) & (img <= 1.0)
    if not ok.all():
        idx = np.unravel_index(int(np.argmin(ok)), img.shape)
        raise DomainError(f"pixel {idx} intensity {img[idx]!r} outside [0, 1]")
    gr, gc = h // k, w // k
    patches = img.reshape(gr, k, gc, k).swapaxes(1, 2).reshape(gr * gc, k * k)
    return PatchBatch(patches, gr, gc, h, w, k)


def tile_predictions(per_patch, grid_rows, grid_cols, height, width, stride):
    """Inverse of ``extract_patches``: place B x K**2 values back on the grid."""
    vals = np.asarray(per_patch, dtype=np.float64)
    k = int(stride)
    if vals.ndim != 2:
        raise ShapeError(f"per-patch values must be B x K**2, got ndim {vals.ndim}")
    if grid_rows * k != height or grid_cols * k != width:
        raise ShapeError(
            f"grid {grid_rows}x{grid_cols} at stride {k} does not cover "
            f"{height}x{width}"
        )
    if vals.shape != (grid_rows * grid_cols, k * k):
        raise ShapeError(
            f"expected {(grid_rows * grid_cols, k * k)} values, got {vals.shape}"
        )
    return (
        vals.reshape(grid_rows, grid_cols, k, k)
        .swapaxes(1, 2)
        .reshape(height, width)
    )


def _pad_reflect(img, k):
    h, w = img.shape
    ph = (-h) % k
    pw = (-w) % k
    if ph == 0 and pw == 0:
        return img
    return np.pad(img, ((0, ph), (0, pw)), mode="reflect")


def segment_image(model, img, pad="error", chunk_size=None):
    """Per-pixel foreground probabilities for a whole image.

    Pipeline: extract patches, lift each pixel with the model's feature map,
    run the chain, squash logits through the logistic function, tile the
    probabilities back. ``pad="reflect"`` mirrors the bottom/right edge up to
    the next stride multiple and crops the output back; the default is a
    shape error for non-divisible images. ``chunk_size`` only bounds memory;
    results are identical for any chunking.
    """
    if model.stride is None:
        raise StateError("model has no stride; it was not built for K x K patches")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"image must be 2-D, got ndim {img.ndim}")
    h, w = img.shape
    k = model.stride
    if pad == "reflect":
        work = _pad_reflect(img, k)
    elif pad == "error":
        work = img
    else:
        raise DomainError(f"unknown padding mode {pad!r}")
    batch = extract_patches(work, k)
    fmap = get_feature_map(model.feature_map)
    feats = fmap(batch.patches.ravel(), model.local_dim)
    feats = feats.reshape(batch.patches.shape[0], k * k, model.local_dim)
    if chunk_size is None:
        logits, _ = forward(model, feats)
    else:
        parts = []
        for start in range(0, feats.shape[0], int(chunk_size)):
            part, _ = forward(model, feats[start : start + int(chunk_size)])
            parts.append(part)
        logits = np.concatenate(parts, axis=0)
    probs = expit(logits)
    full = tile_predictions(
        probs, batch.grid_rows, batch.grid_cols, batch.height, batch.width, k
    )
    return full[:h, :w]
