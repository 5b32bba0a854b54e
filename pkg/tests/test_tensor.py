"""Tensor helpers: shape math, elementwise ops, gradient checker, TT3D files."""

import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twostream3d.tensor import (
    GradCheckReport,
    NonFiniteError,
    ShapeError,
    check_finite,
    check_gradients,
    coords_of,
    elementwise,
    flat_index,
    matmul,
    read_tensor,
    read_tensor_from,
    scalar_broadcast,
    strides_of,
    tensor_filled,
    validate_shape,
    write_tensor,
    write_tensor_to,
)

shapes = st.lists(st.integers(1, 5), min_size=1, max_size=4)


def test_validate_shape_accepts_positive_extents():
    assert validate_shape([3, 1, 7]) == (3, 1, 7)


@pytest.mark.parametrize("bad", [[0], [2, 0, 3], [-1], [4, -2]])
def test_validate_shape_rejects_non_positive(bad):
    with pytest.raises(ShapeError):
        validate_shape(bad)


def test_validate_shape_rejects_overflowing_element_count():
    with pytest.raises(ShapeError):
        validate_shape([2**32, 2**32])


def test_tensor_filled_value_and_dtype():
    t = tensor_filled((2, 3), 1.5)
    assert t.shape == (2, 3)
    assert t.dtype == np.float32
    assert np.all(t == 1.5)


def test_elementwise_matches_numpy():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((3, 4)).astype(np.float32)
    b = rng.standard_normal((3, 4)).astype(np.float32)
    np.testing.assert_array_equal(elementwise(a, b, "add"), a + b)
    np.testing.assert_array_equal(elementwise(a, b, "mul"), a * b)


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        elementwise(np.zeros((2, 2)), np.zeros((2, 3)), "add")


def test_elementwise_unknown_op():
    with pytest.raises(ValueError):
        elementwise(np.zeros(2), np.zeros(2), "sub")


def test_scalar_broadcast():
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    np.testing.assert_array_equal(scalar_broadcast(a, 2.0, "add_scalar"), a + 2.0)
    np.testing.assert_array_equal(scalar_broadcast(a, 2.0, "scale"), a * 2.0)


def test_matmul_against_nested_loops():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal((3, 5))
    want = np.zeros((4, 5))
    for i in range(4):
        for j in range(5):
            for k in range(3):
                want[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(matmul(a, b), want, rtol=1e-12)


def test_matmul_rejects_mismatched_inner_dims():
    with pytest.raises(ShapeError):
        matmul(np.zeros((2, 3)), np.zeros((4, 2)))


@given(shapes, st.data())
@settings(max_examples=60, deadline=None)
def test_flat_index_round_trip(dims, data):
    dims = tuple(dims)
    coords = tuple(data.draw(st.integers(0, d - 1)) for d in dims)
    flat = flat_index(dims, coords)
    assert coords_of(dims, flat) == coords
    # row-major: flat index equals dot(coords, strides)
    assert flat == sum(c * s for c, s in zip(coords, strides_of(dims)))


def test_strides_row_major():
    assert strides_of((2, 3, 4)) == (12, 4, 1)


def test_flat_index_out_of_range():
    with pytest.raises(ShapeError):
        flat_index((2, 3), (2, 0))
    with pytest.raises(ShapeError):
        coords_of((2, 3), 6)


def test_check_finite_passes_and_fails():
    check_finite(np.ones(3), "x")
    with pytest.raises(NonFiniteError, match="loss"):
        check_finite(np.array([1.0, np.nan]), "loss")
    with pytest.raises(NonFiniteError):
        check_finite(np.array([np.inf]), "y")


def test_gradcheck_accepts_correct_gradient():
    def f(x):
        return float((x**3).sum()), 3.0 * x**2

    # the central difference of x^3 carries an exact epsilon^2 bias, so keep
    # |x| >= 0.1 to leave the relative error well under the tolerance
    x = np.linspace(0.1, 1.2, 12).reshape(3, 4)
    report = check_gradients(f, x)
    assert report.ok(1e-4)
    assert report.max_relative_error < 1e-4


def test_gradcheck_flags_wrong_gradient():
    def f(x):
        return float((x**2).sum()), 2.5 * x  # wrong by 25 percent

    report = check_gradients(f, np.ones(4))
    assert not report.ok(1e-4)
    assert report.max_relative_error > 0.1


def test_gradcheck_uses_private_buffer():
    x = np.arange(6, dtype=np.float64)[::2]  # non-contiguous view
    base = x.copy()

    def f(v):
        return float((v**2).sum()), 2.0 * v

    assert check_gradients(f, x).ok(1e-4)
    np.testing.assert_array_equal(x, base)


def test_gradcheck_report_fields():
    r = GradCheckReport(0.5, 3, 1.0, 2.0)
    assert not r.ok(1e-4)
    assert r.worst_index == 3


@given(shapes, st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_tt3d_round_trip(dims, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(tuple(dims)).astype(np.float32)
    buf = io.BytesIO()
    write_tensor_to(buf, a)
    buf.seek(0)
    back = read_tensor_from(buf)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, a)


def test_tt3d_file_round_trip(tmp_path):
    a = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
    p = tmp_path / "t.tt3d"
    write_tensor(p, a)
    back = read_tensor(p)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, a.astype(np.float32))
    back[0, 0, 0] = 9.0  # must be writable


def test_tt3d_header_layout(tmp_path):
    p = tmp_path / "t.tt3d"
    write_tensor(p, np.zeros((2, 3), dtype=np.float32))
    raw = p.read_bytes()
    assert raw[:4] == b"TT3D"
    version, ndim = struct.unpack("<BB", raw[4:6])
    assert (version, ndim) == (1, 2)
    assert struct.unpack("<2I", raw[6:14]) == (2, 3)
    assert len(raw) == 14 + 4 * 6


def test_tt3d_rejects_bad_magic():
    with pytest.raises(ValueError, match="magic"):
        read_tensor_from(io.BytesIO(b"NOPE" + b"\x00" * 16))


def test_tt3d_rejects_bad_version():
    buf = io.BytesIO()
    write_tensor_to(buf, np.zeros(2, dtype=np.float32))
    raw = bytearray(buf.getvalue())
    raw[4] = 9
    with pytest.raises(ValueError, match="version"):
        read_tensor_from(io.BytesIO(bytes(raw)))


def test_tt3d_rejects_truncated_payload():
    buf = io.BytesIO()
    write_tensor_to(buf, np.zeros(4, dtype=np.float32))
    raw = buf.getvalue()[:-4]
    with pytest.raises(ValueError, match="truncated"):
        read_tensor_from(io.BytesIO(raw))


def test_tt3d_stream_holds_consecutive_records():
    buf = io.BytesIO()
    a = np.ones((2, 2), dtype=np.float32)
    b = np.full((3,), 7.0, dtype=np.float32)
    write_tensor_to(buf, a)
    write_tensor_to(buf, b)
    buf.seek(0)
    np.testing.assert_array_equal(read_tensor_from(buf), a)
    np.testing.assert_array_equal(read_tensor_from(buf), b)


def test_tt3d_accepts_non_contiguous_input(tmp_path):
    a = np.arange(16, dtype=np.float32).reshape(4, 4).T
    p = tmp_path / "t.tt3d"
    write_tensor(p, a)
    np.testing.assert_array_equal(read_tensor(p), np.ascontiguousarray(a))
