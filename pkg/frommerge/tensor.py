"""Dense float64 matrix kernel used by every merging routine.

Matrices are plain ``numpy`` arrays of dtype float64 with exactly two
dimensions. Functions here never mutate their inputs.
"""

import hashlib
import logging
from collections.abc import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from frommerge.errors import NumericError, ShapeError, ValidationError
from frommerge.settings import DEFAULT_RCOND

# Configure logging
logger = logging.getLogger(__name__)

Matrix = NDArray[np.float64]

_SEED_LIMIT = 2**64


def as_matrix(values: ArrayLike) -> Matrix:
    """
    Convert an array of any rank to a float64 matrix.

    0-D values become 1×1, 1-D vectors become 1×d and k-D tensors become
    dim₀ × (product of the remaining dims).

    Args:
        values: Array-like input

    Returns:
        A new C-contiguous float64 matrix
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim > 2:
        arr = arr.reshape(arr.shape[0], -1)
    return np.array(arr, dtype=np.float64, order="C", copy=True)


def frobenius_norm(m: Matrix) -> float:
    """Return sqrt of the sum of squared entries."""
    return float(np.linalg.norm(m, "fro"))


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """
    Standard matrix product.

    Raises:
        ShapeError: If a.cols != b.rows
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(m: Matrix) -> Matrix:
    return np.ascontiguousarray(m.T)


def _condition_estimate(m: Matrix) -> float:
    try:
        return float(np.linalg.cond(m, 1)) if m.shape[0] == m.shape[1] else float("nan")
    except np.linalg.LinAlgError:
        return float("inf")


def svd(m: Matrix) -> tuple[Matrix, NDArray[np.float64], Matrix]:
    """
    Thin singular value decomposition.

    Args:
        m: Input matrix (d₁×d₂)

    Returns:
        (U, S, Vt) with U d₁×k, S descending length k, Vt k×d₂, k = min(d₁, d₂)

    Raises:
        NumericError: If LAPACK does not converge or the input is not finite
    """
    if not np.all(np.isfinite(m)):
        raise NumericError(f"svd input of shape {m.shape} contains non-finite values")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as e:
        error_msg = f"svd did not converge for shape {m.shape} (condition estimate {_condition_estimate(m):.3e})"
        logger.error(error_msg)
        raise NumericError(error_msg) from e
    return u, s, vt


def pinv(m: Matrix, rcond: float = DEFAULT_RCOND) -> Matrix:
    """
    Moore-Penrose pseudoinverse through the SVD.

    Singular values at or below ``rcond * σ_max`` are treated as zero.

    Args:
        m: Input matrix (d₁×d₂)
        rcond: Relative cutoff in (0, 1)

    Returns:
        The d₂×d₁ pseudoinverse

    Raises:
        ValidationError: If rcond is outside (0, 1)
        NumericError: If the SVD fails
    """
    if not 0.0 < rcond < 1.0:
        raise ValidationError(f"rcond must lie in (0, 1), got {rcond}")
    u, s, vt = svd(m)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((m.shape[1], m.shape[0]), dtype=np.float64)
    keep = s > rcond * s[0]
    s_inv = np.divide(1.0, s, out=np.zeros_like(s), where=keep)
    return (vt.T * s_inv) @ u.T


def axpy_scale(ops: Sequence[tuple[float, Matrix]]) -> Matrix:
    """
    Weighted elementwise sum Σ cᵢ·mᵢ, accumulated in input order.

    Raises:
        ValidationError: If ops is empty
        ShapeError: If the matrices differ in shape
    """
    if not ops:
        raise ValidationError("axpy_scale needs at least one term")
    shape = ops[0][1].shape
    out = np.zeros(shape, dtype=np.float64)
    for coefficient, m in ops:
        if m.shape != shape:
            raise ShapeError(f"cannot add matrices of shape {shape} and {m.shape}")
        out += coefficient * m
    return out


def counter_rng(seed: int, label: bytes | str) -> np.random.Generator:
    """
    Counter-based generator keyed by (seed, label).

    The 128-bit Philox key is the BLAKE2b digest of the little-endian seed
    followed by the label, so every (seed, label) pair owns an independent
    stream that does not depend on call order or thread schedule.

    Args:
        seed: Unsigned 64-bit seed
        label: Stream label, e.g. a layer name

    Returns:
        A fresh numpy Generator
    """
    if not 0 <= seed < _SEED_LIMIT:
        raise ValidationError(f"seed must be an unsigned 64-bit integer, got {seed}")
    label_bytes = label.encode("utf-8") if isinstance(label, str) else bytes(label)
    digest = hashlib.blake2b(seed.to_bytes(8, "little") + label_bytes, digest_size=16).digest()
    key = np.frombuffer(digest, dtype="<u8").astype(np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def seeded_normal(rows: int, cols: int, sigma: float, seed: int, stream_label: bytes | str) -> Matrix:
    """
    Draw a rows×cols matrix of i.i.d. N(0, sigma²) samples.

    Identical arguments give bit-identical output.
    """
    if sigma <= 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    if rows <= 0 or cols <= 0:
        raise ValidationError(f"matrix dimensions must be positive, got {rows}x{cols}")
    gen = counter_rng(seed, stream_label)
    return sigma * gen.standard_normal((rows, cols), dtype=np.float64)
