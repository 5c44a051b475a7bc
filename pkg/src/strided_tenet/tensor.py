"""Dense tensors plus the contraction and gradient-check primitives the
rest of the package builds on.

Values are 64-bit floats stored flat in row-major order. There is
deliberately no broadcasting and no general einsum front end: shapes must
line up exactly, which turns silent contraction bugs into loud ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericError, ShapeError

__all__ = [
    "DenseTensor",
    "GradCheckReport",
    "contract",
    "matrix_chain_product",
    "finite_difference_check",
]


class DenseTensor:
    """Immutable dense tensor: a shape tuple plus a flat float64 buffer.

    ``shape`` may be empty, in which case the tensor is a scalar holding a
    single value. ``data`` always satisfies ``len(data) == prod(shape)``.
    """

    __slots__ = ("shape", "data")

    def __init__(self, shape, data):
        shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in shape):
            raise ShapeError(f"all extents must be >= 1, got shape {shape}")
        flat = np.array(data, dtype=np.float64).reshape(-1)
        if flat.size != math.prod(shape):
            raise ShapeError(
                f"shape {shape} implies {math.prod(shape)} entries, "
                f"data has {flat.size}"
            )
        flat.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", flat)

    def __setattr__(self, name, value):
        raise AttributeError("DenseTensor is immutable")

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr.shape, arr.ravel())

    def to_array(self):
        """Read-only ndarray view with this tensor's shape."""
        return self.data.reshape(self.shape)

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.size != 1:
            raise ShapeError(f"item() needs a single entry, shape is {self.shape}")
        return float(self.data[0])

    def __repr__(self):
        return f"DenseTensor(shape={self.shape})"


def _check_axes(axes, ndim, label):
    axes = [int(a) for a in axes]
    if len(set(axes)) != len(axes):
        raise IndexError(f"duplicate axis in {label}: {axes}")
    for a in axes:
        if not 0 <= a < ndim:
            raise IndexError(f"axis {a} out of range for {label} with {ndim} dims")
    return axes


def contract(a, b, axes_a, axes_b):
    """Contract paired axes of two tensors.

    Pairing axis ``axes_a[i]`` of ``a`` with ``axes_b[i]`` of ``b`` sums
    products over that shared index. The result keeps the free axes of ``a``
    (in their original order) followed by the free axes of ``b``; contracting
    every axis of both operands yields a scalar.
    """
    axes_a = _check_axes(axes_a, a.ndim, "a")
    axes_b = _check_axes(axes_b, b.ndim, "b")
    if len(axes_a) != len(axes_b):
        raise ShapeError(
            f"axis lists must pair up, got {len(axes_a)} vs {len(axes_b)}"
        )
    for ax_a, ax_b in zip(axes_a, axes_b):
        if a.shape[ax_a] != b.shape[ax_b]:
            raise ShapeError(
                f"cannot pair axis {ax_a} (extent {a.shape[ax_a]}) of a with "
                f"axis {ax_b} (extent {b.shape[ax_b]}) of b"
            )
    out = np.tensordot(a.to_array(), b.to_array(), axes=(axes_a, axes_b))
    return DenseTensor(out.shape, out.ravel())


def matrix_chain_product(ms, order="left"):
    """Multiply a non-empty sequence of matrices.

    ``order="left"`` reduces strictly left to right, which is the bit-stable
    default. ``order="balanced"`` multiplies neighbouring pairs recursively;
    it reassociates floating point and is only equal to the left fold up to
    rounding.
    """
    mats = [np.asarray(m, dtype=np.float64) for m in ms]
    if not mats:
        raise ShapeError("matrix chain is empty")
    for i, m in enumerate(mats):
        if m.ndim != 2:
            raise ShapeError(f"chain entry {i} is not a matrix (ndim {m.ndim})")
    for i in range(len(mats) - 1):
        if mats[i].shape[1] != mats[i + 1].shape[0]:
            raise ShapeError(
                f"inner extents mismatch between entries {i} and {i + 1}: "
                f"{mats[i].shape} vs {mats[i + 1].shape}"
            )
    if order == "left":
        acc = mats[0]
        for m in mats[1:]:
            acc = acc @ m
        return acc
    if order == "balanced":
        while len(mats) > 1:
            nxt = [mats[i] @ mats[i + 1] for i in range(0, len(mats) - 1, 2)]
            if len(mats) % 2:
                nxt.append(mats[-1])
            mats = nxt
        return mats[0]
    raise DomainError(f"unknown reduction order {order!r}")


@dataclass
class GradCheckReport:
    """Worst-case comparison of an analytic gradient against central differences."""

    max_relative_error: float
    worst_coordinate: list[int] = field(default_factory=list)
    analytic_value: float = float("nan")
    numeric_value: float = float("nan")

    @property
    def passed(self):
        return self.max_relative_error < 1e-5


def finite_difference_check(f, x, analytic_grad, eps):
    """Compare ``analytic_grad`` of a scalar function against central differences.

    Each coordinate of ``x`` is perturbed by ``+/- eps`` and the two-sided
    difference quotient is compared to the analytic entry; the relative error
    denominator is ``max(|analytic|, |numeric|, 1e-12)``.
    """
    if eps <= 0:
        raise DomainError(f"eps must be positive, got {eps}")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    analytic = np.asarray(analytic_grad, dtype=np.float64).reshape(-1)
    if x.size != analytic.size:
        raise ShapeError(
            f"parameter vector has {x.size} entries, analytic gradient {analytic.size}"
        )
    report = GradCheckReport(0.0)
    worst = -1.0
    for i in range(x.size):
        probe = x.copy()
        probe[i] = x[i] + eps
        f_plus = float(f(probe))
        probe[i] = x[i] - eps
        f_minus = float(f(probe))
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericError(f"function evaluation non-finite at coordinate {i}")
        numeric = (f_plus - f_minus) / (2.0 * eps)
        denom = max(abs(analytic[i]), abs(numeric), 1e-12)
        rel = abs(analytic[i] - numeric) / denom
        if rel > worst:
            worst = rel
            report = GradCheckReport(rel, [i], float(analytic[i]), numeric)
    return report
