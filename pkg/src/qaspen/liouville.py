"""Liouville-space superoperators and the projected free propagator.

All superoperators act on column-major vectorized density matrices, so that
``vec(A X B) = kron(B.T, A) @ vec(X)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np
from scipy.linalg import expm

from .ttcore import MPO, SvdPolicy, mpo_from_matrix

HERMITICITY_TOL = 1e-12
GROUPING_TOL = 1e-10


def vectorize(a: np.ndarray) -> np.ndarray:
    """Stack the columns of a square matrix into a vector."""
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    return a.reshape(-1, order="F")


def devectorize(v: np.ndarray, d: int | None = None) -> np.ndarray:
    """Inverse of :func:`vectorize`."""
    v = np.asarray(v)
    if d is None:
        d = int(round(np.sqrt(v.size)))
    if v.ndim != 1 or v.size != d * d:
        raise ValueError(f"vector of size {v.size} is not a vectorized {d}x{d} matrix")
    return v.reshape((d, d), order="F")


def commutator_superop(h: np.ndarray) -> np.ndarray:
    """Matrix of ``A -> h A - A h``."""
    eye = np.eye(h.shape[0])
    return np.kron(eye, h) - np.kron(h.T, eye)


def anticommutator_superop(h: np.ndarray) -> np.ndarray:
    """Matrix of ``A -> h A + A h``."""
    eye = np.eye(h.shape[0])
    return np.kron(eye, h) + np.kron(h.T, eye)


def _check_hermitian(name: str, a: np.ndarray) -> None:
    if np.max(np.abs(a - a.conj().T), initial=0.0) > HERMITICITY_TOL:
        raise ValueError(f"{name} is not Hermitian")


def pad_operator(a: np.ndarray, dim: int) -> np.ndarray:
    """Zero-pad a square matrix to ``dim x dim``."""
    a = np.asarray(a, dtype=complex)
    if a.shape[0] == dim:
        return a
    out = np.zeros((dim, dim), dtype=complex)
    out[: a.shape[0], : a.shape[1]] = a
    return out


@dataclass(frozen=True)
class HilbertSystem:
    """System Hamiltonian ``h0`` and noise coupling ``v`` in Hilbert space.

    Inputs whose dimension is not a power of two are zero-padded up to
    ``2**qubits``; the padded states are decoupled from everything.
    """

    h0: np.ndarray
    v: np.ndarray
    dim: int = field(init=False)
    qubits: int = field(init=False)

    def __post_init__(self):
        h0 = np.asarray(self.h0, dtype=complex)
        v = np.asarray(self.v, dtype=complex)
        if h0.ndim != 2 or h0.shape[0] != h0.shape[1] or h0.shape != v.shape:
            raise ValueError("h0 and v must be square matrices of equal shape")
        _check_hermitian("h0", h0)
        _check_hermitian("v", v)
        d = h0.shape[0]
        q = max(1, int(np.ceil(np.log2(d))))
        object.__setattr__(self, "dim", d)
        object.__setattr__(self, "qubits", q)
        object.__setattr__(self, "h0", pad_operator(h0, 2**q))
        object.__setattr__(self, "v", pad_operator(v, 2**q))

    @property
    def padded_dim(self) -> int:
        return 2**self.qubits

    def pad(self, a: np.ndarray) -> np.ndarray:
        """Embed a physical-dimension operator into the padded space."""
        a = np.asarray(a)
        if a.shape != (self.dim, self.dim) and a.shape != (self.padded_dim,) * 2:
            raise ValueError(f"operator shape {a.shape} does not match dim {self.dim}")
        return pad_operator(a, self.padded_dim)


@dataclass(frozen=True)
class EigenEntry:
    """One group of degenerate noise-coupling eigenvalues.

    ``omega`` holds one frequency per noise field at a single time slice,
    e.g. ``(w,)`` for extrinsic noise and ``(w_minus, w_plus)`` for
    intrinsic noise.
    """

    omega: tuple[float, ...]
    projector: np.ndarray
    multiplicity: int


@dataclass(frozen=True)
class LiouvilleSystem:
    hilbert: HilbertSystem
    mode: str
    l0: np.ndarray
    couplings: dict[str, np.ndarray]
    eigentable: list[EigenEntry]

    @property
    def n_fields(self) -> int:
        return len(self.eigentable[0].omega)

    @property
    def liouville_dim(self) -> int:
        return self.l0.shape[0]

    def omegas(self) -> np.ndarray:
        """Eigentable frequencies, shape ``(n_entries, n_fields)``."""
        return np.array([e.omega for e in self.eigentable], dtype=float)

    def frequency_range(self) -> list[tuple[float, float]]:
        """Per-field ``(min, max)`` over the coupling spectrum."""
        w = self.omegas()
        return [(float(w[:, f].min()), float(w[:, f].max())) for f in range(w.shape[1])]


def _group_entries(pairs: np.ndarray, vectors: np.ndarray, tol: float) -> list[EigenEntry]:
    # pairs: (n, n_fields) eigenvalue tuples; vectors: (D, n) orthonormal columns
    groups: list[list[int]] = []
    for idx in range(pairs.shape[0]):
        for g in groups:
            if np.all(np.abs(pairs[g[0]] - pairs[idx]) <= tol):
                g.append(idx)
                break
        else:
            groups.append([idx])
    entries = []
    for g in groups:
        omega = tuple(float(np.mean(pairs[g, f])) for f in range(pairs.shape[1]))
        omega = tuple(0.0 if abs(w) <= tol else w for w in omega)
        x = vectors[:, g]
        entries.append(EigenEntry(omega, x @ x.conj().T, len(g)))
    # zero-frequency groups first, then ascending
    entries.sort(key=lambda e: (e.omega[0] != 0.0,) + e.omega)
    return entries


def build_liouville(sys: HilbertSystem, mode: str = "extrinsic") -> LiouvilleSystem:
    """Liouvillian of ``h0`` and the noise-coupling superoperators of ``v``.

    ``mode="extrinsic"`` couples one real field through the commutator with
    ``v``; ``mode="intrinsic"`` adds the anticommutator coupling of the
    dissipative partner field, and the eigentable then carries joint
    ``(w_minus, w_plus)`` pairs.
    """
    if mode not in ("extrinsic", "intrinsic"):
        raise ValueError(f"unknown noise mode {mode!r}")
    h0, v = sys.h0, sys.v
    l0 = commutator_superop(h0)
    couplings = {"minus": commutator_superop(v)}
    if mode == "intrinsic":
        couplings["plus"] = anticommutator_superop(v)
        comm = couplings["minus"] @ couplings["plus"] - couplings["plus"] @ couplings["minus"]
        scale = max(1.0, np.linalg.norm(couplings["minus"]) * np.linalg.norm(couplings["plus"]))
        if np.linalg.norm(comm) > 1e-10 * scale:
            raise ValueError("commutator and anticommutator couplings do not commute")

    # L1 eigenvectors are vec(|a><b|) in the eigenbasis of v
    evals, evecs = np.linalg.eigh(v)
    d = v.shape[0]
    a_idx, b_idx = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
    a_idx, b_idx = a_idx.ravel(), b_idx.ravel()
    vectors = np.stack([np.kron(evecs[:, b].conj(), evecs[:, a])
                        for a, b in zip(a_idx, b_idx)], axis=1)
    cols = [evals[a_idx] - evals[b_idx]]
    if mode == "intrinsic":
        cols.append(evals[a_idx] + evals[b_idx])
    pairs = np.stack(cols, axis=1)
    radius = float(np.max(np.abs(pairs))) if pairs.size else 0.0
    tol = GROUPING_TOL * radius if radius > 0 else GROUPING_TOL
    entries = _group_entries(pairs, vectors, tol)
    return LiouvilleSystem(sys, mode, l0, couplings, entries)


@dataclass(frozen=True)
class FreePropagator:
    """Half-step free evolution sandwiching each coupling eigenprojector."""

    tau: float
    liouville: LiouvilleSystem
    dense: list[np.ndarray]
    half_step: np.ndarray

    @property
    def omegas(self) -> np.ndarray:
        return self.liouville.omegas()

    def full_step(self) -> np.ndarray:
        return self.half_step @ self.half_step


def free_propagator(ls: LiouvilleSystem, tau: float) -> FreePropagator:
    """Build ``G0(w) = exp(-i L0 tau/2) E(w) exp(-i L0 tau/2)`` for every entry."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    half = expm(-0.5j * tau * ls.l0)
    dense = [half @ e.projector @ half for e in ls.eigentable]
    return FreePropagator(float(tau), ls, dense, half)


def tensorize_propagator(fp: FreePropagator, eps_svd: float,
                         max_bond: int | None = None) -> list[MPO]:
    """Compress each ``G0(w)`` into an MPO over ``2q`` qubit sites.

    Site ``k`` carries the ``k``-th (big-endian) bit of both the row and the
    column index of the ``d**2 x d**2`` superoperator.
    """
    policy = SvdPolicy(eps_svd, max_bond)
    n_sites = 2 * fp.liouville.hilbert.qubits
    dims = [2] * n_sites
    return [mpo_from_matrix(g, dims, dims, policy) for g in fp.dense]


def random_hermitian(d: int, rng: np.random.Generator) -> np.ndarray:
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return (a + a.conj().T) / 2


def pauli() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    sx = np.array([[0, 1], [1, 0]], dtype=complex)
    sy = np.array([[0, -1j], [1j, 0]], dtype=complex)
    sz = np.array([[1, 0], [0, -1]], dtype=complex)
    return sx, sy, sz


def spin_boson(omega: float = 1.0, eps: float = 0.5, alpha: float = 0.75) -> HilbertSystem:
    """Biased two-level system ``H0 = omega sx + eps sz`` with ``V = alpha sz``."""
    sx, _, sz = pauli()
    return HilbertSystem(omega * sx + eps * sz, alpha * sz)


def site_chain(d: int, omega: float = 1.0, eps: float = 1.0, alpha: float = 0.5,
               periodic: bool = True) -> HilbertSystem:
    """Single-excitation chain with alternating site energies and couplings.

    ``H0 = eps sum_n (-1)^n |n><n| + omega sum_n (|n><n+1| + h.c.)`` and
    ``V = alpha sum_n (-1)^n |n><n|`` with sites ``n = 1..d``.
    """
    if d < 2:
        raise ValueError("chain needs at least two sites")
    signs = np.array([(-1.0) ** n for n in range(1, d + 1)])
    h0 = np.diag(eps * signs).astype(complex)
    for n in range(d if periodic else d - 1):
        m = (n + 1) % d
        h0[n, m] += omega
        h0[m, n] += omega
    return HilbertSystem(h0, np.diag(alpha * signs))
