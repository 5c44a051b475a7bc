"""Supervised training of the strided MPS segmenter.

Binary cross entropy on the patch logits (averaged over pixels, so the
learning rate does not depend on stride or batch size), Adam updates in a
fixed core order, seeded shuffling of whole-image batches, and early
stopping on validation Dice with the best-epoch weights checkpointed and
restored at the end.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import render_overlay
from .errors import DomainError, NumericError, ShapeError, StateError
from .features import get_feature_map
from .metrics import dice, prauc, threshold
from .mps import (
    backward,
    flatten_cores,
    forward,
    load_checkpoint,
    save_checkpoint,
    unflatten_cores,
)
from .segmenter import extract_patches, tile_predictions
from .tensor import finite_difference_check

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "EpochRecord",
    "AdamState",
    "EvalResult",
    "bce_with_logits",
    "adam_step",
    "train",
    "evaluate",
    "gradient_check",
]

HISTORY_HEADER = "epoch,train_loss,val_dice,val_prauc,seconds"


@dataclass
class TrainConfig:
    stride: int = 8
    local_dim: int = 4
    bond_dim: int = 4
    learning_rate: float = 5e-4
    batch_size: int = 1
    patience: int = 10
    max_epochs: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    feature_map: str = "sinusoidal"
    snapshot_every: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DomainError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise DomainError(
                f"adam betas must be in [0, 1), got {self.adam_beta1}, {self.adam_beta2}"
            )
        if self.patience < 1:
            raise DomainError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise DomainError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise DomainError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.snapshot_every < 0:
            raise DomainError(f"snapshot_every must be >= 0, got {self.snapshot_every}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_dice: float
    val_prauc: float
    seconds: float


@dataclass
class TrainHistory:
    """Per-epoch trail of one training run.

    ``best_epoch`` is the 1-based epoch with the highest validation Dice
    (earliest on ties), or None when no epoch ran.
    """

    records: list = field(default_factory=list)
    best_epoch: int | None = None

    def to_csv(self):
        lines = [HISTORY_HEADER]
        for r in self.records:
            lines.append(
                f"{r.epoch},{r.train_loss!r},{r.val_dice!r},{r.val_prauc!r},{r.seconds!r}"
            )
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        Path(path).write_text(self.to_csv())


def bce_with_logits(logits, targets):
    """Mean binary cross entropy straight from logits, plus its gradient.

    Evaluated as max(z, 0) - t*z + log(1 + exp(-|z|)) so large logits cannot
    overflow; the per-logit gradient is (sigmoid(z) - t) / count.
    """
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if z.shape != t.shape:
        raise ShapeError(f"logits {z.shape} and targets {t.shape} differ")
    if z.size == 0:
        raise ShapeError("empty logits")
    if not np.isfinite(z).all():
        raise NumericError("non-finite logits in loss")
    if not (((t == 0.0) | (t == 1.0)).all()):
        bad = t[(t != 0.0) & (t != 1.0)].ravel()[0]
        raise DomainError(f"targets must be 0 or 1, found {bad!r}")
    loss = float(np.mean(np.maximum(z, 0.0) - t * z + np.log1p(np.exp(-np.abs(z)))))
    grad = (expit(z) - t) / z.size
    return loss, grad


@dataclass
class AdamState:
    """First/second moment accumulators, one array per parameter block."""

    m: list
    v: list
    t: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(
            m=[np.zeros_like(np.asarray(p)) for p in params],
            v=[np.zeros_like(np.asarray(p)) for p in params],
        )


def adam_step(params, grads, state, cfg):
    """One bias-corrected Adam update, applied in list order, in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and state must have matching block counts")
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    lr, eps = cfg.learning_rate, cfg.adam_epsilon
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def _patchify(dataset, stride, fmap, local_dim):
    """Precompute per-image patch features and targets.

    Returns one entry per image: features (B x N x d), flat patch targets
    (B x K**2), the mask, the image, and the tiling geometry.
    """
    prepared = []
    for img, mask in dataset:
        batch = extract_patches(np.asarray(img, dtype=np.float64), stride)
        feats = fmap(batch.patches.ravel(), local_dim)
        feats = feats.reshape(batch.patches.shape[0], stride * stride, local_dim)
        targets = extract_patches(np.asarray(mask, dtype=np.float64), stride).patches
        prepared.append((feats, targets, np.asarray(mask), np.asarray(img), batch))
    return prepared


def _validation_scores(model, prepared):
    dices = []
    all_scores = []
    all_labels = []
    for feats, _, mask, _, batch in prepared:
        logits, _ = forward(model, feats)
        probs = expit(logits)
        soft = tile_predictions(
            probs, batch.grid_rows, batch.grid_cols, batch.height, batch.width, batch.stride
        )
        dices.append(dice(threshold(soft, 0.5), mask))
        all_scores.append(soft.ravel())
        all_labels.append(mask.ravel())
    val_dice = float(np.mean(dices))
    val_prauc = prauc(np.concatenate(all_scores), np.concatenate(all_labels))
    return val_dice, val_prauc


def train(model, train_set, val_set, cfg, checkpoint_dir=None, snapshot_dir=None):
    """Optimize the model; returns (best-epoch model, TrainHistory).

    Each epoch shuffles the training images with the seeded generator,
    walks whole-image mini-batches, and applies one Adam step per batch.
    Validation Dice at threshold 0.5 drives early stopping: after
    ``cfg.patience`` consecutive epochs without improvement the loop stops
    and the checkpointed best-epoch weights are returned, not the last ones.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise DomainError("train and validation sets must be non-empty")
    if cfg.stride != model.stride:
        raise StateError(f"config stride {cfg.stride} != model stride {model.stride}")
    fmap = get_feature_map(model.feature_map)
    train_prep = _patchify(train_set, model.stride, fmap, model.local_dim)
    val_prep = _patchify(val_set, model.stride, fmap, model.local_dim)

    rng = np.random.default_rng(cfg.seed)
    state = AdamState.for_params(model.cores)
    history = TrainHistory()
    tmp = None
    if checkpoint_dir is None:
        tmp = tempfile.TemporaryDirectory(prefix="strided-tenet-")
        checkpoint_dir = tmp.name
    best_path = Path(checkpoint_dir) / "best.npz"
    best_dice = -math.inf
    stale = 0
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            tic = time.perf_counter()
            order = rng.permutation(len(train_prep))
            loss_sum = 0.0
            count_sum = 0
            for start in range(0, order.size, cfg.batch_size):
                chosen = order[start : start + cfg.batch_size]
                feats = np.concatenate([train_prep[i][0] for i in chosen], axis=0)
                targets = np.concatenate([train_prep[i][1] for i in chosen], axis=0)
                try:
                    logits, cache = forward(model, feats)
                    loss, dz = bce_with_logits(logits, targets)
                    grads = backward(model, cache, dz)
                except NumericError as exc:
                    raise NumericError(
                        f"training diverged at epoch {epoch}, batch {start // cfg.batch_size}: {exc}",
                        site=exc.site,
                    ) from exc
                adam_step(model.cores, grads, state, cfg)
                loss_sum += loss * logits.size
                count_sum += logits.size
            val_dice, val_prauc = _validation_scores(model, val_prep)
            seconds = time.perf_counter() - tic
            history.records.append(
                EpochRecord(epoch, loss_sum / count_sum, val_dice, val_prauc, seconds)
            )
            if val_dice > best_dice:
                best_dice = val_dice
                history.best_epoch = epoch
                stale = 0
                save_checkpoint(model, best_path)
            else:
                stale += 1
            if snapshot_dir is not None and cfg.snapshot_every > 0:
                if epoch % cfg.snapshot_every == 0:
                    _write_snapshots(model, val_prep, Path(snapshot_dir), epoch)
            if stale >= cfg.patience:
                break
        if history.best_epoch is not None:
            model = load_checkpoint(best_path)
    finally:
        if tmp is not None:
            tmp.cleanup()
    return model, history


def _write_snapshots(model, val_prep, snapshot_dir, epoch, limit=4):
    out = snapshot_dir / f"epoch_{epoch:04d}"
    out.mkdir(parents=True, exist_ok=True)
    for i, (feats, _, mask, img, batch) in enumerate(val_prep[:limit]):
        logits, _ = forward(model, feats)
        soft = tile_predictions(
            expit(logits), batch.grid_rows, batch.grid_cols, batch.height, batch.width,
            batch.stride,
        )
        render_overlay(img, threshold(soft, 0.5), mask, out / f"val_{i:02d}.png")


@dataclass
class EvalResult:
    dice_mean: float
    dice_std: float
    prauc: float
    per_image_dice: list


def evaluate(predictor, dataset, pad="error"):
    """Dice (mean and population std over images) plus pixel-pooled PRAUC.

    ``predictor`` is either an MpsModel or any callable mapping an image to
    a soft probability map of the same shape.
    """
    if len(dataset) == 0:
        raise DomainError("dataset must be non-empty")
    if callable(predictor):
        predict = predictor
    else:
        from .segmenter import segment_image

        predict = lambda img: segment_image(predictor, img, pad=pad)  # noqa: E731
    dices = []
    scores = []
    labels = []
    for img, mask in dataset:
        soft = predict(img)
        dices.append(dice(threshold(soft, 0.5), mask))
        scores.append(np.asarray(soft).ravel())
        labels.append(np.asarray(mask).ravel())
    dices = np.asarray(dices, dtype=np.float64)
    pooled = prauc(np.concatenate(scores), np.concatenate(labels))
    return EvalResult(
        dice_mean=float(dices.mean()),
        dice_std=float(dices.std()),
        prauc=pooled,
        per_image_dice=dices.tolist(),
    )


def gradient_check(model, features, targets, eps=1e-6, grad_transform=None):
    """Finite-difference check of the full loss gradient over every core.

    ``grad_transform`` exists as a test hook to corrupt the analytic
    gradient and prove the harness can fail.
    """
    shapes = [c.shape for c in model.cores]
    base = model.clone()

    def loss_at(flat):
        trial = base.clone()
        trial.cores = unflatten_cores(flat, shapes)
        logits, _ = forward(trial, features)
        loss, _ = bce_with_logits(logits, targets)
        return loss

    logits, cache = forward(model, features)
    _, dz = bce_with_logits(logits, targets)
    grads = backward(model, cache, dz)
    analytic = flatten_cores(grads)
    if grad_transform is not None:
        analytic = grad_transform(analytic)
    return finite_difference_check(loss_at, flatten_cores(model.cores), analytic, eps)
