"""Sinusoidal per-pixel feature lifts.

A pixel intensity x in [0, 1] is lifted to a d-vector whose component k
(0-based, k = 0 .. d-1) is

    sqrt(C(d-1, k)) * cos(pi*x/2)**(d-1-k) * sin(pi*x/2)**k

The squared components are Binomial(d-1, sin^2(pi*x/2)) probabilities, so
the vector has unit Euclidean norm for every x, and the tensor product of
per-pixel vectors (the global lift of a whole patch) is a unit vector too.

Maps are pluggable through a small string-keyed registry; "sinusoidal" is
the only built-in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, DomainError, ShapeError
from .tensor import DenseTensor

__all__ = [
    "LocalFeatureConfig",
    "local_feature_map",
    "map_patch",
    "materialize_global_feature_map",
    "register_feature_map",
    "get_feature_map",
    "feature_map_names",
]

# d^N entries at most for a materialized global lift.
GLOBAL_MAP_GUARD = 2**20


@dataclass(frozen=True)
class LocalFeatureConfig:
    """Width of the per-pixel lift. d = 1 would be a constant map."""

    d: int

    def __post_init__(self):
        if self.d < 2:
            raise DomainError(f"local feature dimension must be >= 2, got {self.d}")


def _binomial_row(n):
    # multiplicative recurrence keeps every C(n, k) exact in float64 for n <= 64
    row = np.empty(n + 1)
    row[0] = 1.0
    for k in range(n):
        row[k + 1] = row[k] * (n - k) / (k + 1)
    return row


def _sinusoidal(xs, d):
    half = 0.5 * np.pi * xs
    c = np.cos(half)[:, None]
    s = np.sin(half)[:, None]
    k = np.arange(d)
    coef = np.sqrt(_binomial_row(d - 1))
    return coef * c ** (d - 1 - k) * s**k


def local_feature_map(x, cfg):
    """Lift one intensity in [0, 1] to its unit-norm d-vector."""
    return map_patch(np.array([x], dtype=np.float64), cfg)[0]


def map_patch(patch, cfg):
    """Lift a flat patch of N intensities to an N x d matrix, row per pixel."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 1:
        raise ShapeError(f"patch must be a flat vector, got ndim {patch.ndim}")
    if patch.size == 0:
        raise ShapeError("patch is empty")
    ok = np.isfinite(patch) & (patch >= 0.0) & (patch <= 1.0)
    if not ok.all():
        i = int(np.argmin(ok))
        raise DomainError(f"pixel {i} intensity {patch[i]!r} outside [0, 1]")
    return _sinusoidal(patch, cfg.d)


def materialize_global_feature_map(patch, cfg):
    """Tensor product of all per-pixel lifts, flattened to length d**N.

    Entry (i_1, ..., i_N) of the product, in row-major order with the first
    pixel slowest, is the product of the per-pixel components. Only usable
    for small N*log(d); this exists as a correctness oracle, not a fast path.
    """
    rows = map_patch(patch, cfg)
    n = rows.shape[0]
    if n * math.log2(cfg.d) > math.log2(GLOBAL_MAP_GUARD) + 1e-9:
        raise CapacityError(
            f"global map of {n} pixels at d={cfg.d} exceeds {GLOBAL_MAP_GUARD} entries"
        )
    vec = rows[0]
    for row in rows[1:]:
        vec = np.multiply.outer(vec, row).ravel()
    return DenseTensor((vec.size,), vec)


_REGISTRY = {}


def register_feature_map(name, fn):
    """Register ``fn(patch, local_dim) -> N x local_dim`` under ``name``."""
    _REGISTRY[name] = fn


def get_feature_map(name):
    try:
        return _REGISTRY[name]
    except KeyError:
        known = ", ".join(sorted(_REGISTRY))
        raise DomainError(f"unknown feature map {name!r}; known: {known}") from None


def feature_map_names():
    return sorted(_REGISTRY)


register_feature_map("sinusoidal", lambda patch, d: map_patch(patch, LocalFeatureConfig(d)))
