"""Dense tensor helpers: storage checks, elementwise math, matmul, gradient
checking and the TT3D binary tensor file format.

All tensors are plain numpy arrays in row-major (C) order. Persistent storage
is float32; gradient checks are expected to run in float64 closures built by
the caller.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Sequence, Tuple

import numpy as np

MAGIC = b"TT3D"
FORMAT_VERSION = 1

# element counts must stay addressable on a 64-bit platform
_MAX_ELEMENTS = 2**63 - 1


class ShapeError(ValueError):
    """Raised when tensor extents are invalid or operands disagree."""


class NonFiniteError(ValueError):
    """Raised when a tensor that must be finite contains NaN or Inf."""


def validate_shape(dims: Sequence[int]) -> Tuple[int, ...]:
    """Check extents are positive ints and the element count is addressable."""
    dims = tuple(int(d) for d in dims)
    if any(d < 1 for d in dims):
        raise ShapeError(f"all extents must be >= 1, got {dims}")
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ELEMENTS:
            raise ShapeError(f"element count of shape {dims} overflows")
    return dims


def tensor_filled(shape: Sequence[int], value: float, dtype=np.float32) -> np.ndarray:
    dims = validate_shape(shape)
    return np.full(dims, value, dtype=dtype)


def elementwise(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    """Elementwise add or mul of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"operand shapes differ: {a.shape} vs {b.shape}")
    if op == "add":
        return a + b
    if op == "mul":
        return a * b
    raise ValueError(f"unknown elementwise op {op!r}")


def scalar_broadcast(a: np.ndarray, s: float, op: str) -> np.ndarray:
    """Combine every element with one scalar (the "(1 + mask)" pattern)."""
    if op == "add_scalar":
        return a + a.dtype.type(s)
    if op == "scale":
        return a * a.dtype.type(s)
    raise ValueError(f"unknown scalar op {op!r}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def strides_of(shape: Sequence[int]) -> Tuple[int, ...]:
    """Row-major element strides, last axis fastest."""
    out = [1] * len(shape)
    for i in range(len(shape) - 2, -1, -1):
        out[i] = out[i + 1] * shape[i + 1]
    return tuple(out)


def flat_index(shape: Sequence[int], coords: Sequence[int]) -> int:
    if len(coords) != len(shape):
        raise ShapeError("coordinate rank does not match shape rank")
    idx = 0
    for c, d, s in zip(coords, shape, strides_of(shape)):
        if not 0 <= c < d:
            raise ShapeError(f"coordinate {coords} out of bounds for {shape}")
        idx += c * s
    return idx


def coords_of(shape: Sequence[int], flat: int) -> Tuple[int, ...]:
    total = 1
    for d in shape:
        total *= d
    if not 0 <= flat < total:
        raise ShapeError(f"flat index {flat} out of bounds for {tuple(shape)}")
    coords = []
    for s in strides_of(shape):
        coords.append(flat // s)
        flat %= s
    return tuple(coords)


def check_finite(a: np.ndarray, context: str = "tensor") -> np.ndarray:
    if not np.isfinite(a).all():
        raise NonFiniteError(f"{context} contains non-finite values")
    return a


@dataclass
class GradCheckReport:
    """Worst-case comparison of an analytic gradient against central differences."""

    max_relative_error: float
    worst_index: int
    analytic: float
    numeric: float

    def ok(self, tolerance: float = 1e-4) -> bool:
        return self.max_relative_error <= tolerance


# relative-error denominator floor; avoids blowup at zero gradients
_REL_FLOOR = 1e-8


def check_gradients(
    f: Callable[[np.ndarray], Tuple[float, np.ndarray]],
    x: np.ndarray,
    epsilon: float = 1e-3,
) -> GradCheckReport:
    """Compare the analytic gradient of a scalar function against central
    finite differences.

    ``f(x)`` must return ``(value, grad)`` with ``grad`` shaped like ``x``.
    Differences are accumulated in float64 regardless of the storage dtype of
    ``x``; for tolerances near 1e-4 the caller should evaluate ``f`` itself in
    float64 as well.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.ascontiguousarray(x).copy()
    value, analytic = f(x)
    if not np.isfinite(value):
        raise NonFiniteError("function value is non-finite at the base point")
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ShapeError("analytic gradient shape does not match input")

    flat = x.reshape(-1)
    worst = GradCheckReport(0.0, 0, float(analytic.reshape(-1)[0]), 0.0)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        up, _ = f(x)
        flat[i] = orig - epsilon
        down, _ = f(x)
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError(f"function value non-finite at perturbed index {i}")
        numeric = (np.float64(up) - np.float64(down)) / (2.0 * np.float64(epsilon))
        a = float(analytic.reshape(-1)[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), _REL_FLOOR)
        if rel >= worst.max_relative_error:
            worst = GradCheckReport(float(rel), i, a, float(numeric))
    return worst


def check_gradients_piecewise(
    forward: Callable[[np.ndarray], Tuple[float, object]],
    gradient: Callable[[np.ndarray], Tuple[float, np.ndarray]],
    x: np.ndarray,
    epsilon: float = 1e-3,
    max_skip_fraction: float = 0.1,
) -> Tuple[GradCheckReport, float]:
    """Central-difference check for piecewise-smooth functions.

    ``forward(x)`` returns ``(value, signature)`` where the signature
    identifies the active smooth region (pooling argmax indices, relu sign
    masks and the like); ``gradient(x)`` returns ``(value, grad)`` at the
    base point. A coordinate whose two perturbed evaluations do not share the
    base point's signature straddles a kink, where a two-sided difference
    estimates no derivative; such coordinates are skipped and their fraction
    is reported. The fraction must stay under ``max_skip_fraction`` so the
    check still covers the function almost everywhere.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.ascontiguousarray(x).copy()
    value, analytic = gradient(x)
    if not np.isfinite(value):
        raise NonFiniteError("function value is non-finite at the base point")
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ShapeError("analytic gradient shape does not match input")
    _, base_sig = forward(x)

    flat = x.reshape(-1)
    worst = GradCheckReport(0.0, 0, float(analytic.reshape(-1)[0]), 0.0)
    skipped = 0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        up, sig_up = forward(x)
        flat[i] = orig - epsilon
        down, sig_down = forward(x)
        flat[i] = orig
        if sig_up != base_sig or sig_down != base_sig:
            skipped += 1
            continue
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError(f"function value non-finite at perturbed index {i}")
        numeric = (np.float64(up) - np.float64(down)) / (2.0 * np.float64(epsilon))
        a = float(analytic.reshape(-1)[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), _REL_FLOOR)
        if rel >= worst.max_relative_error:
            worst = GradCheckReport(float(rel), i, a, float(numeric))
    fraction = skipped / max(1, flat.size)
    if fraction > max_skip_fraction:
        raise ValueError(
            f"{skipped} of {flat.size} coordinates sit on region boundaries; "
            f"the check would not be meaningful")
    return worst, fraction


def write_tensor_to(fh, a: np.ndarray) -> None:
    """Write one TT3D record to an open binary stream.

    Layout: magic ``TT3D``, u8 version, u8 ndim, ndim x u32 little-endian
    extents, then the float32 little-endian payload in row-major order.
    """
    a = np.ascontiguousarray(a, dtype="<f4")
    if a.ndim < 1 or a.ndim > 255:
        raise ShapeError(f"TT3D supports 1..255 axes, got {a.ndim}")
    validate_shape(a.shape)
    fh.write(MAGIC)
    fh.write(struct.pack("<BB", FORMAT_VERSION, a.ndim))
    fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
    fh.write(a.tobytes(order="C"))


def write_tensor(path, a: np.ndarray) -> None:
    """Write one tensor as a standalone TT3D file."""
    with open(path, "wb") as fh:
        write_tensor_to(fh, a)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor_from(fh)


def read_tensor_from(fh) -> np.ndarray:
    """Read one TT3D record from an open binary stream."""
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad TT3D magic {magic!r}")
    version, ndim = struct.unpack("<BB", fh.read(2))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported TT3D version {version}")
    dims = validate_shape(struct.unpack(f"<{ndim}I", fh.read(4 * ndim)))
    count = int(np.prod(dims, dtype=np.int64))
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError("TT3D payload truncated")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
