"""Immutable row-major sparse matrices and the differentiable sparse products.

Storage is CSR with column indices sorted inside each row, unique
coordinates and no stored zeros, so ``triples()`` is always lexicographic.
Products delegate to scipy's CSR kernel, which walks each output row's
entries in ascending column order and accumulates sequentially; that fixed
order is what makes results reproducible bit for bit.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .tensor import Tensor, _node, as_tensor

DTYPE = np.float64


class SparseMatrix:
    __slots__ = ("rows", "cols", "indptr", "indices", "data", "_csr", "_csr_t")

    def __init__(self, rows: int, cols: int, indptr, indices, data):
        if rows < 0 or cols < 0:
            raise ValueError("extents must be nonnegative")
        indptr = np.asarray(indptr, dtype=np.int64)
        indices = np.asarray(indices, dtype=np.int64)
        data = np.asarray(data, dtype=DTYPE)
        if indptr.shape != (rows + 1,) or indices.shape != data.shape:
            raise ValueError("inconsistent CSR arrays")
        for arr in (indptr, indices, data):
            arr.setflags(write=False)
        self.rows, self.cols = int(rows), int(cols)
        self.indptr, self.indices, self.data = indptr, indices, data
        self._csr = None
        self._csr_t = None

    # construction -------------------------------------------------------
    @classmethod
    def from_triples(cls, rows: int, cols: int, r, c, v=None) -> "SparseMatrix":
        """Build from coordinate lists; duplicates are summed, zeros dropped."""
        r = np.asarray(r, dtype=np.int64)
        c = np.asarray(c, dtype=np.int64)
        v = np.ones(r.shape, dtype=DTYPE) if v is None else np.asarray(v, dtype=DTYPE)
        if r.size and (r.min() < 0 or r.max() >= rows or c.min() < 0 or c.max() >= cols):
            raise IndexError("coordinate out of range")
        order = np.lexsort((c, r))
        r, c, v = r[order], c[order], v[order]
        if r.size:
            first = np.ones(r.size, dtype=bool)
            first[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
            starts = np.flatnonzero(first)
            v = np.add.reduceat(v, starts)
            r, c = r[starts], c[starts]
            keep = v != 0.0
            r, c, v = r[keep], c[keep], v[keep]
        indptr = np.zeros(rows + 1, dtype=np.int64)
        np.add.at(indptr, r + 1, 1)
        return cls(rows, cols, np.cumsum(indptr), c, v)

    @classmethod
    def from_dense(cls, dense) -> "SparseMatrix":
        dense = np.asarray(dense, dtype=DTYPE)
        r, c = np.nonzero(dense)
        return cls.from_triples(dense.shape[0], dense.shape[1], r, c, dense[r, c])

    @classmethod
    def from_scipy(cls, m) -> "SparseMatrix":
        coo = sp.coo_matrix(m)
        return cls.from_triples(coo.shape[0], coo.shape[1], coo.row, coo.col, coo.data)

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        idx = np.arange(n)
        return cls.from_triples(n, n, idx, idx)

    # views --------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return int(self.data.size)

    def row_indices(self) -> np.ndarray:
        return np.repeat(np.arange(self.rows), np.diff(self.indptr))

    def triples(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.row_indices(), self.indices.copy(), self.data.copy()

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return self.indices[lo:hi], self.data[lo:hi]

    def row_sums(self) -> np.ndarray:
        out = np.zeros(self.rows, dtype=DTYPE)
        for i in range(self.rows):
            lo, hi = self.indptr[i], self.indptr[i + 1]
            acc = 0.0
            for v in self.data[lo:hi]:
                acc += v
            out[i] = acc
        return out

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=DTYPE)
        out[self.row_indices(), self.indices] = self.data
        return out

    def to_scipy(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = sp.csr_matrix(
                (self.data, self.indices, self.indptr), shape=self.shape
            )
        return self._csr

    def _scipy_t(self) -> sp.csr_matrix:
        if self._csr_t is None:
            self._csr_t = self.to_scipy().T.tocsr()
            self._csr_t.sort_indices()
        return self._csr_t

    def transpose(self) -> "SparseMatrix":
        r, c, v = self.triples()
        return SparseMatrix.from_triples(self.cols, self.rows, c, r, v)

    @property
    def T(self) -> "SparseMatrix":
        return self.transpose()

    def scale(self, alpha: float) -> "SparseMatrix":
        r, c, v = self.triples()
        return SparseMatrix.from_triples(self.rows, self.cols, r, c, alpha * v)

    def select_rows(self, rows) -> np.ndarray:
        """Dense copy of the given rows (batch extraction)."""
        return self.to_scipy()[np.asarray(rows)].toarray()

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseMatrix):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None

    def __repr__(self) -> str:
        return f"SparseMatrix({self.rows}x{self.cols}, nnz={self.nnz})"


def _csr_dense(m: sp.csr_matrix, x: np.ndarray) -> np.ndarray:
    return np.asarray(m @ np.ascontiguousarray(x), dtype=DTYPE)


def sparse_dense_matmul(s: SparseMatrix, x) -> Tensor:
    """``s @ x`` with ``s`` constant; differentiable in ``x``."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[0] != s.cols:
        raise ValueError(f"cannot multiply {s.shape} sparse by {x.data.shape} dense")
    out = _csr_dense(s.to_scipy(), x.data)
    return _node(out, (x,), lambda g: ((x, _csr_dense(s._scipy_t(), g)),), "spmm")


def dense_sparse_matmul(x, s: SparseMatrix) -> Tensor:
    """``x @ s`` with ``s`` constant, computed as ``(s.T @ x.T).T``."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[1] != s.rows:
        raise ValueError(f"cannot multiply {x.data.shape} dense by {s.shape} sparse")
    out = _csr_dense(s._scipy_t(), x.data.T).T
    return _node(
        np.ascontiguousarray(out),
        (x,),
        lambda g: ((x, np.ascontiguousarray(_csr_dense(s.to_scipy(), g.T).T)),),
        "dsmm",
    )
