"""Tensor trains and matrix product operators.

Cores are stored as ``(B_left, p, B_right)`` for a tensor train and
``(B_left, p_row, p_col, B_right)`` for a matrix product operator; the
outermost bonds are always one.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg


@dataclass(frozen=True)
class SvdPolicy:
    """Truncation rule: relative cutoff and an optional bond-dimension cap."""

    eps: float = 1e-8
    max_bond: int | None = None

    def __post_init__(self):
        if not 0 < self.eps < 1:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")
        if self.max_bond is not None and self.max_bond < 1:
            raise ValueError("max_bond must be positive")

    def tighter(self, factor: float) -> "SvdPolicy":
        return SvdPolicy(max(self.eps * factor, 1e-300), self.max_bond)


class BondDimensionError(RuntimeError):
    """Raised when a train exceeds its allowed bond dimension."""

    def __init__(self, bonds: Sequence[int], limit: int):
        self.bonds = list(bonds)
        self.limit = limit
        super().__init__(f"bond dimensions {self.bonds} exceed the limit {limit}")


class TensorTrain:
    """Chain of cores; rank-3 cores for tensors, rank-4 cores for operators."""

    def __init__(self, cores: Iterable[np.ndarray]):
        cores = [np.asarray(c) for c in cores]
        if not cores:
            raise ValueError("a tensor train needs at least one core")
        ndim = cores[0].ndim
        if ndim not in (3, 4) or any(c.ndim != ndim for c in cores):
            raise ValueError("cores must all be rank 3 or all be rank 4")
        if cores[0].shape[0] != 1 or cores[-1].shape[-1] != 1:
            raise ValueError("edge bond dimensions must be one")
        for k, (left, right) in enumerate(zip(cores[:-1], cores[1:])):
            if left.shape[-1] != right.shape[0]:
                raise ValueError(f"bond mismatch between sites {k} and {k + 1}: "
                                 f"{left.shape[-1]} != {right.shape[0]}")
        self.cores = cores

    def __len__(self) -> int:
        return len(self.cores)

    def __repr__(self) -> str:
        return f"TensorTrain(sites={len(self)}, bonds={self.bonds})"

    @property
    def is_operator(self) -> bool:
        return self.cores[0].ndim == 4

    @property
    def bonds(self) -> list[int]:
        return [c.shape[-1] for c in self.cores[:-1]]

    @property
    def max_bond(self) -> int:
        return max(self.bonds, default=1)

    @property
    def phys_shape(self) -> list[tuple[int, ...]]:
        return [c.shape[1:-1] for c in self.cores]

    @property
    def nbytes(self) -> int:
        return sum(c.nbytes for c in self.cores)

    @property
    def dtype(self):
        return np.result_type(*self.cores)

    def copy(self) -> "TensorTrain":
        return TensorTrain([c.copy() for c in self.cores])

    def __mul__(self, scalar) -> "TensorTrain":
        cores = list(self.cores)
        cores[0] = cores[0] * scalar
        return TensorTrain(cores)

    __rmul__ = __mul__

    def dense(self) -> np.ndarray:
        """Full tensor; operator trains keep interleaved ``(p1, q1, p2, q2, ...)`` legs."""
        out = self.cores[0]
        for core in self.cores[1:]:
            out = np.tensordot(out, core, axes=(-1, 0))
        return out[0, ..., 0]

    def to_matrix(self) -> np.ndarray:
        """Row-by-column matrix of an operator train (big-endian site order)."""
        if not self.is_operator:
            raise ValueError("to_matrix needs an operator train")
        t = self.dense()
        n = len(self)
        rows = [c.shape[1] for c in self.cores]
        cols = [c.shape[2] for c in self.cores]
        t = t.reshape([x for pair in zip(rows, cols) for x in pair])
        t = t.transpose(list(range(0, 2 * n, 2)) + list(range(1, 2 * n, 2)))
        return t.reshape(int(np.prod(rows)), int(np.prod(cols)))

    def to_vector(self) -> np.ndarray:
        return self.dense().reshape(-1)

    def norm(self) -> float:
        return float(np.linalg.norm(recompress_exact_norm(self)))


MPO = TensorTrain


def recompress_exact_norm(tt: TensorTrain) -> np.ndarray:
    # Frobenius norm via left-orthogonalization, no truncation
    r = np.ones((1, 1), dtype=tt.dtype)
    for core in tt.cores:
        c = np.tensordot(r, core, axes=(1, 0))
        mat = c.reshape(-1, c.shape[-1])
        _, r = np.linalg.qr(mat)
    return r


def _svd(mat: np.ndarray):
    try:
        return np.linalg.svd(mat, full_matrices=False)
    except np.linalg.LinAlgError:
        return scipy.linalg.svd(mat, full_matrices=False, lapack_driver="gesvd")


def _keep(s: np.ndarray, policy: SvdPolicy) -> int:
    """Smallest rank whose discarded tail is below ``eps * ||kept||``."""
    if s.size == 0 or s[0] == 0:
        return 1
    sq = s**2
    tail = np.cumsum(sq[::-1])[::-1]  # tail[k] = sum of sq[k:]
    head = np.cumsum(sq)              # head[k-1] = sum of sq[:k]
    keep = s.size
    for k in range(1, s.size + 1):
        discarded = tail[k] if k < s.size else 0.0
        if discarded <= policy.eps**2 * head[k - 1]:
            keep = k
            break
    if policy.max_bond is not None:
        keep = min(keep, policy.max_bond)
    return keep


def tt_svd(tensor: np.ndarray, policy: SvdPolicy = SvdPolicy()) -> TensorTrain:
    """Left-to-right TT-SVD of a dense tensor into rank-3 cores."""
    tensor = np.asarray(tensor)
    dims = tensor.shape
    if len(dims) == 0:
        raise ValueError("cannot decompose a scalar")
    if not np.any(tensor):
        return TensorTrain([np.zeros((1, n, 1), dtype=tensor.dtype) for n in dims])
    cores = []
    rank = 1
    rest = tensor.reshape(1, -1)
    for n in dims[:-1]:
        mat = rest.reshape(rank * n, -1)
        u, s, vh = _svd(mat)
        k = _keep(s, policy)
        cores.append(u[:, :k].reshape(rank, n, k))
        rest = s[:k, None] * vh[:k]
        rank = k
    cores.append(rest.reshape(rank, dims[-1], 1))
    return TensorTrain(cores)


def mpo_from_matrix(mat: np.ndarray, row_dims: Sequence[int], col_dims: Sequence[int],
                    policy: SvdPolicy = SvdPolicy()) -> TensorTrain:
    """Split a matrix into an operator train, pairing row and column digits per site."""
    row_dims, col_dims = list(row_dims), list(col_dims)
    if len(row_dims) != len(col_dims):
        raise ValueError("row and column site counts differ")
    mat = np.asarray(mat)
    if mat.shape != (int(np.prod(row_dims)), int(np.prod(col_dims))):
        raise ValueError(f"matrix shape {mat.shape} does not match site dimensions")
    n = len(row_dims)
    t = mat.reshape(row_dims + col_dims)
    t = t.transpose([x for k in range(n) for x in (k, n + k)])
    t = t.reshape([r * c for r, c in zip(row_dims, col_dims)])
    tt = tt_svd(t, policy)
    return TensorTrain([c.reshape(c.shape[0], r, q, c.shape[-1])
                        for c, r, q in zip(tt.cores, row_dims, col_dims)])


def identity_mpo(dims: Sequence[int], dtype=complex) -> TensorTrain:
    return TensorTrain([np.eye(n, dtype=dtype)[None, :, :, None] for n in dims])


def mpo_add(a: TensorTrain, b: TensorTrain) -> TensorTrain:
    """Exact sum by direct sums of cores; bond dimensions add."""
    if len(a) != len(b) or a.phys_shape != b.phys_shape:
        raise ValueError("trains must have the same length and physical dimensions")
    n = len(a)
    dtype = np.result_type(a.dtype, b.dtype)
    if n == 1:
        return TensorTrain([a.cores[0] + b.cores[0]])
    cores = []
    for k, (x, y) in enumerate(zip(a.cores, b.cores)):
        phys = x.shape[1:-1]
        if k == 0:
            core = np.concatenate([x, y], axis=-1).astype(dtype)
        elif k == n - 1:
            core = np.concatenate([x, y], axis=0).astype(dtype)
        else:
            core = np.zeros((x.shape[0] + y.shape[0],) + phys + (x.shape[-1] + y.shape[-1],), dtype)
            core[: x.shape[0], ..., : x.shape[-1]] = x
            core[x.shape[0]:, ..., x.shape[-1]:] = y
        cores.append(core)
    return TensorTrain(cores)


def tensor_append(a: TensorTrain, m: np.ndarray) -> TensorTrain:
    """``a (x) m`` with ``m`` as a trailing bond-one core."""
    m = np.asarray(m)
    want = 2 if a.is_operator else 1
    if m.ndim != want:
        raise ValueError(f"expected a {want}-d factor, got {m.ndim}-d")
    return TensorTrain(list(a.cores) + [m[None, ..., None]])


def _as_operator(tt: TensorTrain) -> tuple[TensorTrain, bool]:
    if tt.is_operator:
        return tt, False
    return TensorTrain([c[:, :, None, :] for c in tt.cores]), True


def _right_orthogonalize(tt: TensorTrain) -> TensorTrain:
    cores = [c.copy() for c in tt.cores]
    for k in range(len(cores) - 1, 0, -1):
        c = cores[k]
        mat = c.reshape(c.shape[0], -1)
        q, r = np.linalg.qr(mat.T)
        cores[k] = q.T.reshape((q.shape[1],) + c.shape[1:])
        cores[k - 1] = np.tensordot(cores[k - 1], r.T, axes=(-1, 0))
    return TensorTrain(cores)


def recompress(tt: TensorTrain, policy: SvdPolicy = SvdPolicy()) -> TensorTrain:
    """Canonical left-right sweep: QR to the right, truncated SVD back."""
    cores = [c.copy() for c in tt.cores]
    n = len(cores)
    if n == 1:
        return TensorTrain(cores)
    for k in range(n - 1):
        c = cores[k]
        q, r = np.linalg.qr(c.reshape(-1, c.shape[-1]))
        cores[k] = q.reshape(c.shape[:-1] + (q.shape[1],))
        cores[k + 1] = np.tensordot(r, cores[k + 1], axes=(1, 0))
    for k in range(n - 1, 0, -1):
        c = cores[k]
        u, s, vh = _svd(c.reshape(c.shape[0], -1))
        keep = _keep(s, policy)
        cores[k] = vh[:keep].reshape((keep,) + c.shape[1:])
        cores[k - 1] = np.tensordot(cores[k - 1], u[:, :keep] * s[:keep], axes=(-1, 0))
    return TensorTrain(cores)


def zip_up(a: TensorTrain, b: TensorTrain, policy: SvdPolicy = SvdPolicy()) -> TensorTrain:
    """Product ``a @ b`` of an operator train with an operator or vector train.

    Sites are contracted pairwise from the left while the growing bond is
    split with a truncated SVD at each step; a final canonical sweep enforces
    ``policy``.
    """
    if not a.is_operator:
        raise ValueError("left factor must be an operator train")
    if len(a) != len(b):
        raise ValueError("trains have different lengths")
    b4, was_vector = _as_operator(b)
    for k, (x, y) in enumerate(zip(a.cores, b4.cores)):
        if x.shape[2] != y.shape[1]:
            raise ValueError(f"inner physical dimensions differ at site {k}")
    a = _right_orthogonalize(a)
    b4 = _right_orthogonalize(b4)
    inner = policy.tighter(1e-2)
    n = len(a)
    carry = np.ones((1, 1, 1), dtype=np.result_type(a.dtype, b4.dtype))
    cores = []
    for k in range(n):
        t = np.einsum("xab,apsc,bsqd->xpqcd", carry, a.cores[k], b4.cores[k], optimize=True)
        chi, p, q, ca, cb = t.shape
        if k == n - 1:
            cores.append(t.reshape(chi, p, q, 1))
            break
        u, s, vh = _svd(t.reshape(chi * p * q, ca * cb))
        keep = _keep(s, inner)
        cores.append(u[:, :keep].reshape(chi, p, q, keep))
        carry = (s[:keep, None] * vh[:keep]).reshape(keep, ca, cb)
    out = recompress(TensorTrain(cores), policy)
    if was_vector:
        out = TensorTrain([c[:, :, 0, :] for c in out.cores])
    return out


def merge_trivial_sites(tt: TensorTrain) -> TensorTrain:
    """Absorb sites whose physical legs are all of size one into a neighbour."""
    cores = list(tt.cores)
    out: list[np.ndarray] = []
    pending = None  # bond matrix waiting to be absorbed into the next site
    for c in cores:
        if pending is not None:
            c = np.tensordot(pending, c, axes=(1, 0))
            pending = None
        if all(n == 1 for n in c.shape[1:-1]) and len(cores) > 1:
            mat = c.reshape(c.shape[0], c.shape[-1])
            if out:
                out[-1] = np.tensordot(out[-1], mat, axes=(-1, 0))
            else:
                pending = mat
            continue
        out.append(c)
    if pending is not None:
        if not out:
            shape = (1,) * (cores[0].ndim - 1)
            return TensorTrain([pending.reshape(shape + (1,))])
        out[-1] = np.tensordot(out[-1], pending, axes=(-1, 0))
    return TensorTrain(out)
