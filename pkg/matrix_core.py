#!/usr/bin/env python3
"""
Dense Matrix Core for PBLS
Float64 matrices, O(n^2) products with signed/scaled permutation keys,
LU inversion and the binary matrix layout shared with the wire protocol
"""

import logging
import struct
import warnings
from dataclasses import dataclass
from typing import Any, Tuple

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)

# Pivots below this magnitude are treated as exact zeros
PIVOT_THRESHOLD = 1e-300

# rows (u64 LE), cols (u64 LE), then rows*cols float64 LE values
MATRIX_HEADER = struct.Struct('<QQ')


class DimensionError(ValueError):
    """Raised when operand shapes do not line up"""
    pass


class SingularMatrixError(ArithmeticError):
    """Raised when a matrix is singular to working precision"""
    pass


class NonFiniteError(ValueError):
    """Raised when a matrix contains NaN or Inf"""
    pass


class InvalidArgumentError(ValueError):
    """Raised for out-of-range scalar arguments"""
    pass


class MatrixFormatError(ValueError):
    """Raised when a serialized matrix cannot be parsed"""
    pass


def _freeze(arr: np.ndarray) -> np.ndarray:
    """Validate a freshly computed array and mark it read-only (no copy)"""
    if arr.ndim != 2:
        raise DimensionError(f"Expected a 2-D matrix, got {arr.ndim}-D")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"Matrix dimensions must be positive, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("Matrix contains NaN or Inf entries")
    arr.flags.writeable = False
    return arr


def dense_matrix(values: Any) -> np.ndarray:
    """
    Build a DenseMatrix: a read-only, C-contiguous float64 array

    Args:
        values: Anything numpy can turn into a 2-D float array

    Returns:
        A private, immutable copy of the values
    """
    arr = np.array(values, dtype=np.float64, order='C', copy=True)
    return _freeze(arr)


def _operand(m: Any) -> np.ndarray:
    """Accept a DenseMatrix as-is, convert anything else"""
    if isinstance(m, np.ndarray) and m.dtype == np.float64 and m.ndim == 2 and not m.flags.writeable:
        return m
    return dense_matrix(m)


def scale_bound(n: int) -> int:
    """Largest admissible |a_i| for a scaled permutation of size n: max(n, 2^ceil(log2 n))"""
    return max(n, 1 << (n - 1).bit_length())


def _readonly_ints(values: Any) -> np.ndarray:
    arr = np.array(values, dtype=np.int64, copy=True).reshape(-1)
    arr.flags.writeable = False
    return arr


def _check_bijection(perm: np.ndarray, name: str) -> None:
    n = perm.shape[0]
    if n < 1:
        raise InvalidArgumentError(f"{name} must have size >= 1")
    seen = np.zeros(n, dtype=bool)
    if perm.min() < 0 or perm.max() >= n:
        raise InvalidArgumentError(f"{name} has indices outside 0..{n - 1}")
    seen[perm] = True
    if not seen.all():
        raise InvalidArgumentError(f"{name} is not a bijection")


@dataclass(frozen=True, eq=False)
class SignedPermutation:
    """Key matrix P with P[i, perm[i]] = signs[i], signs in {-1, +1}"""
    perm: np.ndarray
    signs: np.ndarray

    def __post_init__(self):
        perm = _readonly_ints(self.perm)
        signs = _readonly_ints(self.signs)
        _check_bijection(perm, "signed permutation")
        if signs.shape != perm.shape:
            raise InvalidArgumentError("signs and perm must have the same length")
        if not np.all(np.abs(signs) == 1):
            raise InvalidArgumentError("every sign must be exactly -1 or +1")
        object.__setattr__(self, 'perm', perm)
        object.__setattr__(self, 'signs', signs)

    @property
    def size(self) -> int:
        return int(self.perm.shape[0])

    def __eq__(self, other):
        if not isinstance(other, SignedPermutation):
            return NotImplemented
        return np.array_equal(self.perm, other.perm) and np.array_equal(self.signs, other.signs)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ScaledPermutation:
    """Key matrix Q with Q[i, perm[i]] = scales[i], scales nonzero integers"""
    perm: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        perm = _readonly_ints(self.perm)
        scales = _readonly_ints(self.scales)
        _check_bijection(perm, "scaled permutation")
        if scales.shape != perm.shape:
            raise InvalidArgumentError("scales and perm must have the same length")
        if np.any(scales == 0):
            raise InvalidArgumentError("every scale must be a nonzero integer")
        bound = scale_bound(perm.shape[0])
        if np.any(np.abs(scales) > bound):
            raise InvalidArgumentError(f"scales must satisfy |a_i| <= {bound}")
        object.__setattr__(self, 'perm', perm)
        object.__setattr__(self, 'scales', scales)

    @property
    def size(self) -> int:
        return int(self.perm.shape[0])

    def __eq__(self, other):
        if not isinstance(other, ScaledPermutation):
            return NotImplemented
        return np.array_equal(self.perm, other.perm) and np.array_equal(self.scales, other.scales)

    __hash__ = None


def dense_signed(p: SignedPermutation) -> np.ndarray:
    """Materialize P as a dense matrix (oracles and tests only)"""
    out = np.zeros((p.size, p.size))
    out[np.arange(p.size), p.perm] = p.signs
    return _freeze(out)


def dense_scaled(q: ScaledPermutation) -> np.ndarray:
    """Materialize Q as a dense matrix (oracles and tests only)"""
    out = np.zeros((q.size, q.size))
    out[np.arange(q.size), q.perm] = q.scales
    return _freeze(out)


def transpose(m: Any) -> np.ndarray:
    m = _operand(m)
    return _freeze(np.ascontiguousarray(m.T))


def add_scaled_identity(m: Any, lam: float) -> np.ndarray:
    """Return lam*I + M for square M"""
    m = _operand(m)
    if m.shape[0] != m.shape[1]:
        raise DimensionError(f"lam*I + M needs a square matrix, got {m.shape}")
    out = m.copy()
    out[np.diag_indices(m.shape[0])] += lam
    return _freeze(out)


def _contraction_order(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Canonical visiting order for the inner index of a @ b.

    Index k is keyed by the sorted absolute mantissas of column a[:, k] followed by
    those of row b[k, :]. The key is unchanged by sign flips, power-of-two scaling and
    permutation of the entries, so a masked operand is summed in the same order as the
    plain one. Equal keys keep index order.
    """
    left = np.sort(np.frexp(np.abs(a))[0], axis=0).T
    right = np.sort(np.frexp(np.abs(b))[0], axis=1)
    keys = np.concatenate([left, right], axis=1)
    return np.lexsort(keys.T[::-1])


def mat_mul(a: Any, b: Any) -> np.ndarray:
    """
    Classical product A @ B, accumulated one outer product at a time

    The inner index is visited in a canonical order (see _contraction_order), which
    makes the result reproducible bit-for-bit under the PAQ masking.

    Raises:
        DimensionError: if A.cols != B.rows
    """
    a = _operand(a)
    b = _operand(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"Cannot multiply {a.shape} by {b.shape}")

    a_cols = np.ascontiguousarray(a.T)
    out = np.zeros((a.shape[0], b.shape[1]))
    term = np.empty_like(out)
    for k in _contraction_order(a, b):
        np.multiply(a_cols[k][:, None], b[k][None, :], out=term)
        np.add(out, term, out=out)
    return _freeze(out)


def mat_vec(a: Any, v: Any) -> np.ndarray:
    """Return A @ v as a read-only float64 vector"""
    a = _operand(a)
    vec = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.shape[1] != vec.shape[0]:
        raise DimensionError(f"Cannot multiply {a.shape} by vector of length {vec.shape[0]}")
    out = a @ vec
    out.flags.writeable = False
    return out


def apply_signed_left(p: SignedPermutation, a: Any) -> np.ndarray:
    """P @ A as a row permutation with sign flips: (PA)[i] = signs[i] * A[perm[i]]"""
    a = _operand(a)
    if p.size != a.shape[0]:
        raise DimensionError(f"P has size {p.size} but A has {a.shape[0]} rows")
    return _freeze(a[p.perm] * p.signs[:, None].astype(np.float64))


def apply_signed_right(m: Any, p: SignedPermutation) -> np.ndarray:
    """M @ P: column i of M, times signs[i], lands in column perm[i]"""
    m = _operand(m)
    if p.size != m.shape[1]:
        raise DimensionError(f"P has size {p.size} but M has {m.shape[1]} columns")
    out = np.empty_like(m)
    out[:, p.perm] = m * p.signs[None, :].astype(np.float64)
    return _freeze(out)


def apply_scaled_left(q: ScaledPermutation, m: Any) -> np.ndarray:
    """Q @ M: (QM)[i] = scales[i] * M[perm[i]]"""
    m = _operand(m)
    if q.size != m.shape[0]:
        raise DimensionError(f"Q has size {q.size} but M has {m.shape[0]} rows")
    return _freeze(m[q.perm] * q.scales[:, None].astype(np.float64))


def apply_scaled_right(a: Any, q: ScaledPermutation) -> np.ndarray:
    """A @ Q: column i of A, times scales[i], lands in column perm[i]"""
    a = _operand(a)
    if q.size != a.shape[1]:
        raise DimensionError(f"Q has size {q.size} but A has {a.shape[1]} columns")
    out = np.empty_like(a)
    out[:, q.perm] = a * q.scales[None, :].astype(np.float64)
    return _freeze(out)


def _check_square_for(q: ScaledPermutation, m: np.ndarray) -> None:
    if m.shape[0] != m.shape[1]:
        raise DimensionError(f"Expected a square matrix, got {m.shape}")
    if m.shape[0] != q.size:
        raise DimensionError(f"Q has size {q.size} but M is {m.shape}")


def conjugate_scaled(q: ScaledPermutation, m: Any) -> np.ndarray:
    """Q^T @ M @ Q in O(n^2)"""
    m = _operand(m)
    _check_square_for(q, m)
    # Q^T M: row i of M, times scales[i], lands in row perm[i]
    left = np.empty_like(m)
    left[q.perm] = m * q.scales[:, None].astype(np.float64)
    return apply_scaled_right(_freeze(left), q)


def unconjugate_scaled(q: ScaledPermutation, m: Any) -> np.ndarray:
    """(Q^T)^-1 @ M @ Q^-1 in O(n^2): out[i, j] = M[perm[i], perm[j]] / scales[i] / scales[j]"""
    m = _operand(m)
    _check_square_for(q, m)
    scales = q.scales.astype(np.float64)
    out = m[np.ix_(q.perm, q.perm)] / scales[:, None]
    out /= scales[None, :]
    return _freeze(out)


def inverse_ops(n: int) -> int:
    """Multiply-add count charged for an LU-based n x n inversion"""
    return -(-n ** 3 // 3) + n ** 3


def _lu_inverse(m: np.ndarray) -> np.ndarray:
    n = m.shape[0]
    with warnings.catch_warnings():
        # exact zero pivots are reported below as SingularMatrixError
        warnings.simplefilter('ignore', scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(m, check_finite=False)

    pivots = np.abs(np.diag(lu))
    smallest = float(pivots.min())
    if not smallest >= PIVOT_THRESHOLD:
        raise SingularMatrixError(f"Matrix is singular to working precision (pivot {smallest:.3e})")

    logger.debug(f"LU of {n}x{n}: pivot ratio estimate {pivot_condition_estimate(lu):.3e}")
    return scipy.linalg.lu_solve((lu, piv), np.eye(n), check_finite=False)


def _symmetric_exponents(m: np.ndarray):
    """
    k with diag(M) * 4^-k in [0.5, 2), or None unless M is symmetric with a positive diagonal.

    Scaling M by a power-of-two diagonal D shifts k by log2 D, so D M D and M reduce
    to the same equilibrated matrix.
    """
    diag = np.diag(m)
    if not (np.all(diag > 0) and np.array_equal(m, m.T)):
        return None
    return np.frexp(diag)[1] // 2


def dense_inverse(m: Any) -> np.ndarray:
    """
    Invert a square matrix by LU decomposition with partial pivoting

    Symmetric matrices with a positive diagonal are first equilibrated by powers of two
    and put into a canonical order (descending equilibrated diagonal). Their inverse is
    then unchanged, bit for bit, by conjugation with a power-of-two scaled permutation:
    inverting Q^T M Q gives exactly Q^-1 M^-1 Q^-T.

    Raises:
        DimensionError: if M is not square
        SingularMatrixError: if a pivot falls below PIVOT_THRESHOLD
    """
    m = _operand(m)
    n = m.shape[0]
    if m.shape[1] != n:
        raise DimensionError(f"Cannot invert non-square matrix {m.shape}")

    k = _symmetric_exponents(m)
    if k is None:
        inv = _lu_inverse(m)
    else:
        shift = -(k[:, None] + k[None, :])
        equilibrated = np.ldexp(m, shift)
        order = np.argsort(-np.diag(equilibrated), kind='stable')
        inv = np.empty_like(equilibrated)
        inv[np.ix_(order, order)] = _lu_inverse(equilibrated[np.ix_(order, order)])
        inv = np.ldexp(inv, shift)

    if not np.all(np.isfinite(inv)):
        raise SingularMatrixError("Inverse overflowed; matrix is numerically singular")
    return _freeze(np.ascontiguousarray(inv))


def pivot_condition_estimate(lu: np.ndarray) -> float:
    """Cheap condition estimate from the LU pivots: max|u_ii| / min|u_ii|"""
    pivots = np.abs(np.diag(lu))
    return float(pivots.max() / pivots.min()) if pivots.min() > 0 else float('inf')


def serialize_matrix(m: Any) -> bytes:
    """Encode as rows, cols (u64 LE) followed by row-major float64 LE values"""
    m = _operand(m)
    rows, cols = m.shape
    return MATRIX_HEADER.pack(rows, cols) + np.ascontiguousarray(m, dtype='<f8').tobytes()


def deserialize_matrix(data: bytes) -> np.ndarray:
    """
    Decode the serialize_matrix layout

    Raises:
        MatrixFormatError: on short/long buffers or zero dimensions
        NonFiniteError: if any value is NaN or Inf
    """
    rows, cols = matrix_shape(data)
    expected = MATRIX_HEADER.size + 8 * rows * cols
    if len(data) != expected:
        raise MatrixFormatError(f"Matrix {rows}x{cols} needs {expected} bytes, got {len(data)}")
    values = np.frombuffer(data, dtype='<f8', count=rows * cols, offset=MATRIX_HEADER.size)
    return dense_matrix(values.reshape(rows, cols))


def matrix_shape(data: bytes) -> Tuple[int, int]:
    """Read just the (rows, cols) header of a serialized matrix"""
    if len(data) < MATRIX_HEADER.size:
        raise MatrixFormatError(f"Matrix header needs {MATRIX_HEADER.size} bytes, got {len(data)}")
    rows, cols = MATRIX_HEADER.unpack_from(data)
    if rows < 1 or cols < 1:
        raise MatrixFormatError(f"Matrix dimensions must be positive, got {rows}x{cols}")
    if rows * cols > (len(data) - MATRIX_HEADER.size) // 8:
        raise MatrixFormatError(f"Matrix {rows}x{cols} does not fit in {len(data)} bytes")
    return rows, cols
