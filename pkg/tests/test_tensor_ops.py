"""Test the dense matrix kernel: reshaping, SVD, pseudoinverse and seeded streams."""

import numpy as np
import pytest

from frommerge.errors import NumericError, ShapeError, ValidationError
from frommerge.tensor import (
    as_matrix,
    axpy_scale,
    counter_rng,
    frobenius_norm,
    matmul,
    pinv,
    seeded_normal,
    svd,
    transpose,
)


@pytest.mark.parametrize(
    "shape,expected",
    [
        ((), (1, 1)),
        ((7,), (1, 7)),
        ((3, 4), (3, 4)),
        ((2, 3, 4), (2, 12)),
    ],
)
def test_as_matrix_reshape_rule(shape: tuple[int, ...], expected: tuple[int, int]) -> None:
    values = np.arange(int(np.prod(shape)), dtype=np.float32).reshape(shape)
    m = as_matrix(values)
    assert m.shape == expected
    assert m.dtype == np.float64
    assert m.flags["C_CONTIGUOUS"]


def test_as_matrix_copies_input() -> None:
    values = np.ones((2, 2))
    m = as_matrix(values)
    m[0, 0] = 5.0
    assert values[0, 0] == 1.0


def test_frobenius_norm_and_transpose() -> None:
    m = np.array([[3.0, 0.0], [0.0, 4.0], [0.0, 0.0]])
    assert frobenius_norm(m) == 5.0
    assert transpose(m).shape == (2, 3)
    assert frobenius_norm(np.zeros((2, 2))) == 0.0


def test_matmul_rejects_mismatched_shapes() -> None:
    with pytest.raises(ShapeError, match="cannot multiply"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    np.testing.assert_array_equal(matmul(np.eye(2), np.ones((2, 3))), np.ones((2, 3)))


def test_axpy_scale() -> None:
    a, b = np.ones((2, 2)), np.arange(4.0).reshape(2, 2)
    np.testing.assert_array_equal(axpy_scale([(2.0, a), (-1.0, b)]), 2.0 * a - b)
    with pytest.raises(ValidationError):
        axpy_scale([])
    with pytest.raises(ShapeError):
        axpy_scale([(1.0, a), (1.0, np.ones((3, 2)))])


def _penrose_residuals(m: np.ndarray, p: np.ndarray) -> list[float]:
    return [
        frobenius_norm(m @ p @ m - m) / max(1.0, frobenius_norm(m)),
        frobenius_norm(p @ m @ p - p) / max(1.0, frobenius_norm(p)),
        frobenius_norm((m @ p).T - m @ p),
        frobenius_norm((p @ m).T - p @ m),
    ]


@pytest.mark.parametrize("seed", range(20))
def test_pinv_penrose_conditions_random(seed: int) -> None:
    rng = np.random.default_rng(seed)
    d1, d2 = rng.integers(1, 65, size=2)
    m = rng.standard_normal((d1, d2))
    p = pinv(m)
    assert p.shape == (d2, d1)
    assert max(_penrose_residuals(m, p)) <= 1e-9


@pytest.mark.parametrize("seed", range(20))
def test_pinv_penrose_conditions_rank_deficient(seed: int) -> None:
    rng = np.random.default_rng(100 + seed)
    d1, d2 = rng.integers(4, 65, size=2)
    rank = int(rng.integers(1, min(d1, d2)))
    m = rng.standard_normal((d1, rank)) @ rng.standard_normal((rank, d2))
    p = pinv(m)
    assert max(_penrose_residuals(m, p)) <= 1e-9
    assert np.linalg.matrix_rank(p) == rank


def test_pinv_of_zero_matrix_is_zero() -> None:
    p = pinv(np.zeros((3, 5)))
    assert p.shape == (5, 3)
    assert not np.any(p)


@pytest.mark.parametrize(
    "m,expected",
    [
        ([[2.0, 0.0], [0.0, 4.0]], [[0.5, 0.0], [0.0, 0.25]]),  # invertible diagonal
        ([[2.0, 0.0], [0.0, 0.0]], [[0.5, 0.0], [0.0, 0.0]]),  # rank-deficient diagonal
    ],
)
def test_pinv_diagonal_examples(m: list[list[float]], expected: list[list[float]]) -> None:
    a = np.array(m)
    p = pinv(a)
    np.testing.assert_allclose(p, np.array(expected), rtol=0, atol=1e-15)
    assert max(_penrose_residuals(a, p)) <= 1e-9


def test_pinv_matches_inverse_for_square_full_rank() -> None:
    m = np.array([[2.0, 1.0], [1.0, 3.0]])
    np.testing.assert_allclose(pinv(m), np.linalg.inv(m), rtol=1e-12)


@pytest.mark.parametrize("rcond", [0.0, 1.0, -1e-3, 2.0])
def test_pinv_rejects_rcond_outside_unit_interval(rcond: float) -> None:
    with pytest.raises(ValidationError, match="rcond"):
        pinv(np.eye(2), rcond)


def test_svd_reconstructs_and_orders() -> None:
    rng = np.random.default_rng(3)
    m = rng.standard_normal((7, 4))
    u, s, vt = svd(m)
    assert u.shape == (7, 4) and s.shape == (4,) and vt.shape == (4, 4)
    assert np.all(np.diff(s) <= 0)
    np.testing.assert_allclose((u * s) @ vt, m, atol=1e-12)


def test_svd_rejects_non_finite_input() -> None:
    m = np.ones((3, 3))
    m[1, 1] = np.nan
    with pytest.raises(NumericError, match="non-finite"):
        svd(m)
    with pytest.raises(NumericError):
        pinv(m)


def test_seeded_normal_is_reproducible_and_label_keyed() -> None:
    a = seeded_normal(4, 5, 0.02, 7, "lora-init/layers.0")
    b = seeded_normal(4, 5, 0.02, 7, "lora-init/layers.0")
    c = seeded_normal(4, 5, 0.02, 7, "lora-init/layers.1")
    d = seeded_normal(4, 5, 0.02, 8, "lora-init/layers.0")
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_seeded_normal_scale() -> None:
    sample = seeded_normal(200, 200, 0.5, 1, "scale")
    assert abs(sample.std() - 0.5) < 0.01
    assert abs(sample.mean()) < 0.01


def test_counter_rng_accepts_bytes_and_str_labels() -> None:
    a = counter_rng(11, "stream").random(5)
    b = counter_rng(11, b"stream").random(5)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("seed", [-1, 2**64])
def test_counter_rng_rejects_out_of_range_seed(seed: int) -> None:
    with pytest.raises(ValidationError, match="seed"):
        counter_rng(seed, "x")


@pytest.mark.parametrize("rows,cols,sigma", [(0, 3, 1.0), (3, 3, 0.0), (3, 3, -1.0)])
def test_seeded_normal_validation(rows: int, cols: int, sigma: float) -> None:
    with pytest.raises(ValidationError):
        seeded_normal(rows, cols, sigma, 0, "x")
