"""Dense and compressed-sparse-row matrix utilities.

Provides the two norms the well-posedness checks rest on (max-row-sum
norm and the spectral radius of a non-negative matrix), conversion
between dense arrays and a validated CSR container, sparse matrix-vector
products, and a little-endian binary encoding for CSR blocks.
"""

import struct
from dataclasses import dataclass

import numpy as np

CSR_MAGIC = b"SIMCSR1"


def as_matrix(a, name="matrix"):
    """Coerce to a 2-D float64 array with finite entries."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def inf_norm(a):
    """Operator infinity norm: the maximum absolute row sum."""
    arr = as_matrix(a)
    if arr.size == 0:
        raise ValueError("empty input")
    return float(np.abs(arr).sum(axis=1).max())


def pf_eigenvalue(a_abs, tol=1e-10, max_iter=10000):
    """Spectral radius of an entrywise non-negative square matrix.

    Power iteration from the all-ones vector with an L1 Rayleigh
    estimate.  A nilpotent matrix drives the iterate to exact zero and
    returns 0.0 immediately.  If the plain iteration has not settled
    within ``max_iter`` (periodic structure makes the estimate
    oscillate), it is rerun on the diagonally shifted matrix
    ``A + delta*I``: for non-negative A the shift moves the spectral
    radius by exactly delta and breaks periodicity.  Estimates of
    defective (Jordan-coupled) leading eigenvalues converge slowly; the
    returned value is then only as good as ``max_iter`` allows.
    """
    arr = as_matrix(a_abs, "a_abs")
    rows, cols = arr.shape
    if rows != cols:
        raise ValueError("pf_eigenvalue expects a square matrix")
    if rows == 0:
        return 0.0
    if np.any(arr < 0):
        raise ValueError("pf_eigenvalue expects the entrywise absolute matrix")
    if not np.any(arr):
        return 0.0

    estimate = _power_estimate(arr, 0.0, tol, max_iter)
    if estimate is not None:
        return max(float(estimate), 0.0)
    # Oscillation: shift to break periodicity, then undo the exact shift.
    delta = 0.05 * max(inf_norm(arr), 1e-6)
    estimate = _power_estimate(arr, delta, tol, max_iter)
    if estimate is None:
        raise RuntimeError("power iteration failed to converge")
    return max(float(estimate) - delta, 0.0)


def _power_estimate(arr, delta, tol, max_iter):
    """L1-normalised power iteration; returns the estimate or None."""
    n = arr.shape[0]
    v = np.full(n, 1.0 / n)
    lam_prev = None
    for _ in range(max_iter):
        w = arr @ v
        if delta:
            w += delta * v
        total = w.sum()
        if total == 0.0:
            return 0.0 + delta
        lam = total  # since v >= 0 and ||v||_1 == 1
        v = w / total
        if lam_prev is not None and abs(lam - lam_prev) <= tol * max(lam, 1.0):
            return lam
        lam_prev = lam
    return None


@dataclass
class CsrMatrix:
    """Validated CSR container; stored entries are exact nonzeros."""

    rows: int
    cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.rows = int(self.rows)
        self.cols = int(self.cols)
        if self.rows < 0 or self.cols < 0:
            raise ValueError("negative dimensions")
        self.row_offsets = np.ascontiguousarray(self.row_offsets, dtype=np.int64)
        self.col_indices = np.ascontiguousarray(self.col_indices, dtype=np.int64)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        off, idx, val = self.row_offsets, self.col_indices, self.values
        if off.shape != (self.rows + 1,):
            raise ValueError("row_offsets must have length rows+1")
        if off[0] != 0 or off[-1] != len(idx) or len(idx) != len(val):
            raise ValueError("inconsistent offsets")
        if np.any(np.diff(off) < 0):
            raise ValueError("row_offsets must be non-decreasing")
        if len(idx):
            if idx.min() < 0 or idx.max() >= self.cols:
                raise ValueError("column index out of range")
            # strict increase within a row: violations occur exactly where
            # consecutive entries share a row and do not increase
            same_row = np.ones(len(idx) - 1, dtype=bool)
            bounds = off[1:-1]
            bounds = bounds[(bounds > 0) & (bounds < len(idx))]
            same_row[bounds - 1] = False
            if np.any(same_row & (np.diff(idx) <= 0)):
                raise ValueError("column indices must increase within each row")
            if np.any(val == 0.0) or not np.all(np.isfinite(val)):
                raise ValueError("stored values must be finite nonzeros")

    @property
    def nnz(self):
        return int(self.values.size)


def to_csr(a, zero_tol=0.0):
    """Dense to CSR; entries with ``|value| <= zero_tol`` are dropped."""
    arr = as_matrix(a)
    if zero_tol < 0:
        raise ValueError("zero_tol must be non-negative")
    mask = np.abs(arr) > zero_tol
    offsets = np.zeros(arr.shape[0] + 1, dtype=np.int64)
    np.cumsum(mask.sum(axis=1), out=offsets[1:])
    cols_idx = np.nonzero(mask)[1]
    return CsrMatrix(arr.shape[0], arr.shape[1], offsets, cols_idx, arr[mask])


def to_dense(s):
    """CSR back to a dense float64 array."""
    out = np.zeros((s.rows, s.cols))
    row_ids = np.repeat(np.arange(s.rows), np.diff(s.row_offsets))
    out[row_ids, s.col_indices] = s.values
    return out


def csr_matvec(s, x):
    """Product ``S @ x`` for a CSR matrix and a dense vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (s.cols,):
        raise ValueError(f"vector length {x.shape} does not match cols {s.cols}")
    if s.nnz == 0:
        return np.zeros(s.rows)
    row_ids = np.repeat(np.arange(s.rows), np.diff(s.row_offsets))
    return np.bincount(row_ids, weights=s.values * x[s.col_indices], minlength=s.rows)


def csr_to_bytes(s):
    """Little-endian encoding: magic, u64 dims/nnz, offsets, indices, values."""
    header = CSR_MAGIC + struct.pack("<QQQ", s.rows, s.cols, s.nnz)
    return b"".join(
        (
            header,
            s.row_offsets.astype("<u8").tobytes(),
            s.col_indices.astype("<u8").tobytes(),
            s.values.astype("<f8").tobytes(),
        )
    )


def csr_from_bytes(blob, offset=0):
    """Decode one CSR block; returns (matrix, next_offset)."""
    if blob[offset : offset + 7] != CSR_MAGIC:
        raise ValueError("bad magic: not a CSR block")
    offset += 7
    rows, cols, nnz = struct.unpack_from("<QQQ", blob, offset)
    offset += 24
    offs = np.frombuffer(blob, dtype="<u8", count=rows + 1, offset=offset)
    offset += 8 * (rows + 1)
    idx = np.frombuffer(blob, dtype="<u8", count=nnz, offset=offset)
    offset += 8 * nnz
    val = np.frombuffer(blob, dtype="<f8", count=nnz, offset=offset)
    offset += 8 * nnz
    mat = CsrMatrix(rows, cols, offs.astype(np.int64), idx.astype(np.int64), val)
    return mat, offset


def save_csr(s, path):
    with open(path, "wb") as fh:
        fh.write(csr_to_bytes(s))


def load_csr(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    mat, end = csr_from_bytes(blob)
    if end != len(blob):
        raise ValueError("trailing bytes after CSR block")
    return mat
