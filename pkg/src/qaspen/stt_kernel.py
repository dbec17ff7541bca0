"""Spectral tensor trains for the Gaussian influence kernel.

The kernel factorizes into transfer functions

    T_n(w_n, ..., w_1) = exp(-sum_D w_n^T Gt_D w_{n-D}),

each represented as a chain of matrix-valued Chebyshev series, one core per
scalar frequency (fields of one time slice are adjacent, newest slice
first). The chains are fitted by stochastic gradient descent on points drawn
from the Gauss-Chebyshev grid and later re-threaded into per-step kernel
cores ``K_n(w) = (x)_m Gamma_{m->n}(w)``.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# points per vectorized block; larger blocks fall out of cache
CHUNK = 1024


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"training diverged at step {step} (loss={loss})")


@dataclass(frozen=True)
class ChebyshevBasis:
    """First-kind Chebyshev polynomials on ``[lo, hi]``.

    The interval always contains zero so that zero frequency (used to close
    unfinished chains) is interpolated rather than extrapolated.
    """

    n_basis: int = 10
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if self.n_basis < 1:
            raise ValueError("need at least one basis function")
        lo, hi = min(self.lo, 0.0), max(self.hi, 0.0)
        if hi == lo:
            lo, hi = -1.0, 1.0
        object.__setattr__(self, "lo", float(lo))
        object.__setattr__(self, "hi", float(hi))

    def to_unit(self, w):
        return (2 * np.asarray(w, dtype=float) - (self.hi + self.lo)) / (self.hi - self.lo)

    def from_unit(self, x):
        return (np.asarray(x) * (self.hi - self.lo) + (self.hi + self.lo)) / 2

    @property
    def nodes(self) -> np.ndarray:
        """Chebyshev zeros mapped to frequency space."""
        j = np.arange(self.n_basis)
        return self.from_unit(np.cos(np.pi * (j + 0.5) / self.n_basis))

    @property
    def pmf(self) -> np.ndarray:
        """Gauss-Chebyshev weights normalized to a probability mass function."""
        w = np.full(self.n_basis, np.pi / self.n_basis)
        return w / w.sum()

    def __call__(self, w) -> np.ndarray:
        """Basis values, shape ``w.shape + (n_basis,)``."""
        x = self.to_unit(w)
        out = np.empty(x.shape + (self.n_basis,))
        out[..., 0] = 1.0
        if self.n_basis > 1:
            out[..., 1] = x
        for k in range(2, self.n_basis):
            out[..., k] = 2 * x * out[..., k - 1] - out[..., k - 2]
        return out


def transfer_function_exact(omegas: np.ndarray, causal: np.ndarray) -> np.ndarray:
    """Exact ``T_n`` at frequencies of shape ``(..., n, n_fields)``, newest slice first."""
    w = np.asarray(omegas, dtype=float)
    n = w.shape[-2]
    if n > causal.shape[0]:
        raise ValueError(f"transfer function of {n} slices exceeds the memory table")
    expo = np.zeros(w.shape[:-2], dtype=np.result_type(causal.dtype, float))
    for lag in range(n):
        expo = expo + np.einsum("...i,ij,...j->...", w[..., 0, :], causal[lag], w[..., lag, :])
    out = np.exp(-expo)
    return out.real if np.isrealobj(causal) or np.all(causal.imag == 0) else out


class TransferSTT:
    """Chebyshev-expanded tensor train of one transfer function.

    ``cores[v]`` has shape ``(n_basis, B_{v-1}, B_v)`` for scalar variable
    ``v = n_fields * lag + field``.
    """

    def __init__(self, n_slices: int, bases: Sequence[ChebyshevBasis],
                 cores: Sequence[np.ndarray]):
        self.n_slices = n_slices
        self.bases = list(bases)
        self.cores = [np.asarray(c) for c in cores]
        if len(self.cores) != n_slices * self.n_fields:
            raise ValueError("core count does not match slices x fields")
        if self.cores[0].shape[1] != 1 or self.cores[-1].shape[2] != 1:
            raise ValueError("edge cores must have outer bond one")
        for a, b in zip(self.cores[:-1], self.cores[1:]):
            if a.shape[2] != b.shape[1]:
                raise ValueError("bond mismatch between linking cores")

    @property
    def n_fields(self) -> int:
        return len(self.bases)

    @property
    def n_vars(self) -> int:
        return len(self.cores)

    @property
    def bonds(self) -> list[int]:
        return [c.shape[2] for c in self.cores[:-1]]

    @property
    def dtype(self):
        return np.result_type(*self.cores)

    @classmethod
    def initialize(cls, n_slices: int, bases: Sequence[ChebyshevBasis], bond: int | Sequence[int],
                   rng: np.random.Generator, noise: float = 1e-2,
                   complex_valued: bool = False) -> "TransferSTT":
        """Near-constant-one start: identity-like zeroth stacks plus small noise."""
        n_vars = n_slices * len(bases)
        if np.isscalar(bond):
            bonds = [int(bond)] * (n_vars - 1)
        else:
            bonds = [int(b) for b in bond]
            if len(bonds) != n_vars - 1:
                raise ValueError(f"need {n_vars - 1} bond dimensions, got {len(bonds)}")
        dims = [1] + bonds + [1]
        cores = []
        for v in range(n_vars):
            nb = bases[v % len(bases)].n_basis
            shape = (nb, dims[v], dims[v + 1])
            core = noise * rng.normal(size=shape)
            if complex_valued:
                core = core + 1j * noise * rng.normal(size=shape)
            r = min(dims[v], dims[v + 1])
            core[0, np.arange(r), np.arange(r)] += 1.0
            cores.append(core)
        return cls(n_slices, bases, cores)

    def extended(self, rng: np.random.Generator, noise: float = 1e-2) -> "TransferSTT":
        """One slice longer, reproducing this function of the newest slices.

        The old tail core keeps its column in bond channel 0 and the appended
        slice starts as the constant one, so the result evaluates to
        ``T_n(w_{n+1}, ..., w_2)`` up to the injected noise.
        """
        cores = [c.copy() for c in self.cores]
        last = cores[-1]
        nb, bl, _ = last.shape
        br = bl
        wide = noise * rng.normal(size=(nb, bl, br)).astype(last.dtype)
        if np.iscomplexobj(last):
            wide = wide + 1j * noise * rng.normal(size=(nb, bl, br))
        wide[:, :, 0] = last[:, :, 0]
        cores[-1] = wide
        for j in range(self.n_fields):
            nbj = self.bases[j].n_basis
            shape = (nbj, br, br if j < self.n_fields - 1 else 1)
            core = noise * rng.normal(size=shape).astype(last.dtype)
            if np.iscomplexobj(last):
                core = core + 1j * noise * rng.normal(size=shape)
            core[0, 0, 0] += 1.0
            if j < self.n_fields - 1:
                core[0, np.arange(1, br), np.arange(1, br)] += 1.0
            cores.append(core)
        return TransferSTT(self.n_slices + 1, self.bases, cores)

    def basis_values(self, points: np.ndarray) -> list[np.ndarray]:
        points = np.asarray(points, dtype=float)
        return [self.bases[v % self.n_fields](points[:, v]) for v in range(self.n_vars)]

    def _core_values(self, psi: list[np.ndarray]) -> list[np.ndarray]:
        out = []
        for p, c in zip(psi, self.cores):
            nb, bl, br = c.shape
            # mixed real/complex matmul bypasses BLAS, so match dtypes first
            out.append((p.astype(c.dtype, copy=False) @ c.reshape(nb, bl * br)).reshape(-1, bl, br))
        return out

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Model values at points of shape ``(batch, n_vars)``."""
        points = np.atleast_2d(points)
        out = []
        for lo in range(0, points.shape[0], CHUNK):
            mats = self._core_values(self.basis_values(points[lo:lo + CHUNK]))
            left = np.ones((mats[0].shape[0], 1), dtype=self.dtype)
            for m in mats:
                left = np.matmul(left[:, None, :], m)[:, 0, :]
            out.append(left[:, 0])
        return np.concatenate(out) if out else np.zeros(0, dtype=self.dtype)

    def loss_and_grad(self, points: np.ndarray, target: np.ndarray):
        """Mean squared modulus of the residual and its gradient per core.

        For complex cores the gradient is ``2 dL/d conj(A)``, the steepest
        ascent direction of the real loss.
        """
        points = np.atleast_2d(points)
        target = np.asarray(target)
        total = points.shape[0]
        sq = 0.0
        grads = [np.zeros_like(c, dtype=np.result_type(c, target)) for c in self.cores]
        for lo in range(0, total, CHUNK):
            part_sq, part = self._chunk_grad(points[lo:lo + CHUNK], target[lo:lo + CHUNK])
            sq += part_sq
            for g, p in zip(grads, part):
                g += p
        scale = 1.0 / total
        return sq * scale, [g * (2 * scale) for g in grads]

    def _node_index(self, points: np.ndarray) -> np.ndarray | None:
        """Node indices of grid points, or ``None`` if any point is off the grid."""
        idx = np.empty(points.shape, dtype=np.intp)
        for v in range(self.n_vars):
            nodes = self.bases[v % self.n_fields].nodes
            j = np.abs(points[:, v, None] - nodes[None, :]).argmin(axis=1)
            if np.any(np.abs(nodes[j] - points[:, v]) > 1e-12 * (1.0 + np.abs(nodes).max())):
                return None
            idx[:, v] = j
        return idx

    def _chunk_grad_nodes(self, idx, target):
        grid = _NodeBatch(self, idx)
        lefts = grid.lefts(self.n_vars)
        rights = grid.rights(0)
        resid = lefts[-1][:, 0] - target
        grads = [grid.core_gradient(v, resid[:, None] * lefts[v].conj(), rights[v + 1].conj())
                 for v in range(self.n_vars)]
        return float(np.sum(np.abs(resid) ** 2)), grads

    def _chunk_grad(self, points, target):
        idx = self._node_index(points)
        if idx is not None:
            return self._chunk_grad_nodes(idx, target)
        psi = self.basis_values(points)
        mats = self._core_values(psi)
        b = points.shape[0]
        lefts = [np.ones((b, 1), dtype=self.dtype)]
        for m in mats:
            lefts.append(np.matmul(lefts[-1][:, None, :], m)[:, 0, :])
        rights = [np.ones((b, 1), dtype=self.dtype)]
        for m in reversed(mats):
            rights.append(np.matmul(m, rights[-1][:, :, None])[:, :, 0])
        rights = rights[::-1]
        resid = lefts[-1][:, 0] - target
        grads = []
        for v in range(self.n_vars):
            env = (resid[:, None] * lefts[v].conj())[:, :, None] * rights[v + 1].conj()[:, None, :]
            g = psi[v].T.astype(env.dtype) @ env.reshape(b, -1)
            grads.append(g.reshape(self.cores[v].shape))
        return float(np.sum(np.abs(resid) ** 2)), grads

    def linking(self, lag: int, omega: Sequence[float]) -> np.ndarray:
        """Linking matrix of slice ``n - lag`` at one slice's frequencies."""
        f = self.n_fields
        out = None
        for j in range(f):
            v = lag * f + j
            psi = self.bases[j](np.asarray([omega[j]], dtype=float))[0]
            m = np.tensordot(psi, self.cores[v], axes=(0, 0))
            out = m if out is None else out @ m
        return out


class _NodeBatch:
    """Sweeps of a :class:`TransferSTT` over a batch of node-grid points.

    On the node grid each core takes only ``n_basis`` distinct values.
    Samples are grouped by node so each sweep step is a handful of small
    dense products rather than a batched matrix product.
    """

    def __init__(self, model: TransferSTT, idx: np.ndarray):
        self.model = model
        self.idx = idx
        self.size = idx.shape[0]
        self.psi_nodes, self.node_mats, self.groups = [], [], []
        for v, c in enumerate(model.cores):
            basis = model.bases[v % model.n_fields]
            p = basis(basis.nodes)
            self.psi_nodes.append(p)
            self.node_mats.append(self.node_values(v, c))
            order = np.argsort(idx[:, v], kind="stable")
            bounds = np.concatenate([[0], np.cumsum(np.bincount(idx[:, v], minlength=len(p)))])
            self.groups.append((order, bounds))

    def node_values(self, v: int, core: np.ndarray) -> np.ndarray:
        """Core ``v`` evaluated at its nodes, shape ``(n_nodes, bl, br)``."""
        p = self.psi_nodes[v]
        return (p.astype(core.dtype) @ core.reshape(core.shape[0], -1)).reshape(-1, *core.shape[1:])

    def apply(self, vec: np.ndarray, v: int, right: bool = False, mats=None) -> np.ndarray:
        """Row ``s`` of ``vec`` times core ``v`` at sample ``s`` (from the left or right)."""
        order, bounds = self.groups[v]
        nm = self.node_mats[v] if mats is None else mats
        src = vec[order]
        out = np.empty((self.size, nm.shape[1] if right else nm.shape[2]),
                       dtype=np.result_type(vec, nm))
        for j in range(nm.shape[0]):
            lo, hi = bounds[j], bounds[j + 1]
            if hi > lo:
                out[lo:hi] = src[lo:hi] @ (nm[j].T if right else nm[j])
        res = np.empty_like(out)
        res[order] = out
        return res

    def lefts(self, stop: int) -> list[np.ndarray]:
        """Left environments ``0..stop``."""
        out = [np.ones((self.size, 1), dtype=self.model.dtype)]
        for v in range(stop):
            out.append(self.apply(out[-1], v))
        return out

    def rights(self, stop: int) -> list[np.ndarray]:
        """Right environments indexed ``stop..n_vars`` (entry ``v`` excludes cores before ``v``)."""
        n = self.model.n_vars
        out = [np.ones((self.size, 1), dtype=self.model.dtype)]
        for v in range(n - 1, stop - 1, -1):
            out.append(self.apply(out[-1], v, right=True))
        return [None] * stop + out[::-1]

    def core_gradient(self, v: int, a: np.ndarray, r: np.ndarray) -> np.ndarray:
        """``sum_s psi_v(s) (x) a_s (x) r_s`` in the shape of core ``v``."""
        order, bounds = self.groups[v]
        a, r = a[order], r[order]
        nn = self.psi_nodes[v].shape[0]
        g_nodes = np.zeros((nn, a.shape[1], r.shape[1]), dtype=np.result_type(a, r))
        for j in range(nn):
            lo, hi = bounds[j], bounds[j + 1]
            if hi > lo:
                g_nodes[j] = a[lo:hi].T @ r[lo:hi]
        g = self.psi_nodes[v].T.astype(g_nodes.dtype) @ g_nodes.reshape(nn, -1)
        return g.reshape(self.model.cores[v].shape)


def sample_training_points(bases: Sequence[ChebyshevBasis], n_dims: int, batch: int,
                           rng: np.random.Generator | int | None = None) -> np.ndarray:
    """I.i.d. draws from the product Gauss-Chebyshev mass function on the node grid.

    Coordinate ``v`` uses ``bases[v % len(bases)]``; returns frequencies of
    shape ``(batch, n_dims)``.
    """
    if batch < 1:
        raise ValueError("batch must be at least one")
    rng = np.random.default_rng(rng)
    out = np.empty((batch, n_dims))
    for v in range(n_dims):
        basis = bases[v % len(bases)]
        idx = rng.choice(basis.n_basis, size=batch, p=basis.pmf)
        out[:, v] = basis.nodes[idx]
    return out


def loss(model: TransferSTT, target: Callable[[np.ndarray], np.ndarray],
         points: np.ndarray) -> float:
    """Mean squared modulus of ``model - target`` over the sample points."""
    points = np.atleast_2d(points)
    if points.shape[0] == 0:
        raise ValueError("empty sample set")
    return float(np.mean(np.abs(model.evaluate(points) - target(points)) ** 2))


def exact_target(causal: np.ndarray, n_slices: int, n_fields: int) -> Callable:
    """Target ``T_n`` as a function of flat points ``(batch, n_slices * n_fields)``."""
    table = np.asarray(causal)[:n_slices]

    def target(points):
        p = np.asarray(points, dtype=float).reshape(-1, n_slices, n_fields)
        return transfer_function_exact(p, table)

    return target


@dataclass
class TrainingConfig:
    """Optimizer settings for fitting one transfer function.

    ``optimizer`` selects plain stochastic gradient descent (``"sgd"``, the
    reference), Adam (``"adam"``) or block-coordinate descent in an
    orthonormal gauge with a line-searched step (``"sweep"``). For the sweep
    variant ``learning_rate`` caps the step along the orthonormal gradient,
    where 1 is the full Newton step, and ``batch`` should comfortably exceed
    ``n_basis * bond**2``.
    """

    batch: int = 512
    learning_rate: float = 0.1
    decay: float = 0.5
    decay_every: int = 2000
    max_steps: int = 5000
    target_loss: float = 1e-12
    seed: int = 0
    optimizer: str = "sgd"
    init_noise: float = 1e-2
    full_grid_limit: int = 0
    batch_growth: float = 1.0
    max_batch: int = 4096
    warm_start: bool = False

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam", "sweep"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch < 1 or self.max_steps < 0:
            raise ValueError("batch must be positive and max_steps non-negative")

    def rate(self, step: int) -> float:
        return self.learning_rate * self.decay ** (step // max(self.decay_every, 1))

    def batch_size(self, step: int) -> int:
        grown = self.batch * self.batch_growth ** (step // max(self.decay_every, 1))
        return int(min(max(grown, self.batch), max(self.max_batch, self.batch)))


@dataclass
class TrainingResult:
    model: TransferSTT
    curve: np.ndarray
    converged: bool


def _grid_points(bases: Sequence[ChebyshevBasis], n_dims: int) -> np.ndarray:
    axes = [bases[v % len(bases)].nodes for v in range(n_dims)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def train(target: Callable[[np.ndarray], np.ndarray], n_slices: int,
          bases: Sequence[ChebyshevBasis], config: TrainingConfig = TrainingConfig(),
          bond: int | Sequence[int] | None = None, complex_valued: bool = False,
          model: TransferSTT | None = None) -> TrainingResult:
    """Fit a transfer function by (stochastic) gradient descent.

    Each step draws ``config.batch`` grid points from the Gauss-Chebyshev
    mass function; when the whole grid has at most ``config.full_grid_limit``
    points the exact mean over the grid is used instead.
    """
    rng = np.random.default_rng(config.seed)
    n_dims = n_slices * len(bases)
    if model is None:
        if bond is None:
            bond = max(b.n_basis for b in bases)
        model = TransferSTT.initialize(n_slices, bases, bond, rng, config.init_noise,
                                       complex_valued)
    if config.optimizer == "sweep":
        return _train_sweep(target, model, config, rng)
    grid_size = math.prod(bases[v % len(bases)].n_basis for v in range(n_dims))
    full = grid_size <= config.full_grid_limit
    if full:
        grid = _grid_points(bases, n_dims)
        grid_target = target(grid)

    m1 = [np.zeros_like(c) for c in model.cores]
    m2 = [np.zeros(c.shape + ((2,) if np.iscomplexobj(c) else ()), dtype=float)
          for c in model.cores]
    b1, b2, adam_eps = 0.9, 0.999, 1e-16
    curve = []
    converged = False
    for step in range(config.max_steps):
        if full:
            pts, tgt = grid, grid_target
        else:
            pts = sample_training_points(bases, n_dims, config.batch_size(step), rng)
            tgt = target(pts)
        value, grads = model.loss_and_grad(pts, tgt)
        curve.append(value)
        if not np.isfinite(value):
            raise TrainingDivergence(step, value)
        if value <= config.target_loss:
            converged = True
            break
        lr = config.rate(step)
        for v, g in enumerate(grads):
            if config.optimizer == "sgd":
                model.cores[v] = model.cores[v] - lr * g
                continue
            m1[v] = b1 * m1[v] + (1 - b1) * g
            sq = np.stack([g.real**2, g.imag**2], -1) if np.iscomplexobj(g) else g**2
            m2[v] = b2 * m2[v] + (1 - b2) * sq
            mhat = m1[v] / (1 - b1 ** (step + 1))
            vhat = m2[v] / (1 - b2 ** (step + 1))
            if np.iscomplexobj(g):
                upd = mhat.real / (np.sqrt(vhat[..., 0]) + adam_eps) \
                    + 1j * mhat.imag / (np.sqrt(vhat[..., 1]) + adam_eps)
            else:
                upd = mhat / (np.sqrt(vhat) + adam_eps)
            model.cores[v] = model.cores[v] - lr * upd
    else:
        if curve and curve[-1] <= config.target_loss:
            converged = True
    logger.info("trained T_%d: %d steps, final loss %.3e", n_slices, len(curve),
                curve[-1] if curve else float("nan"))
    return TrainingResult(model, np.asarray(curve), converged)


def _orthonormal_scale(basis: ChebyshevBasis) -> np.ndarray:
    # Chebyshev polynomials times these factors are orthonormal under the node PMF
    c = np.full(basis.n_basis, np.sqrt(2.0))
    c[0] = 1.0
    return c


def _shift_center(model: TransferSTT, v: int, step: int, scales: list[np.ndarray]) -> None:
    """Make core ``v`` an isometry (in the orthonormal basis) and move its
    remainder into the neighbour ``v + step``."""
    c = scales[v][:, None, None]
    a = model.cores[v] / c
    nb, bl, br = a.shape
    if step > 0:
        q, r = np.linalg.qr(a.transpose(1, 0, 2).reshape(bl * nb, br))
        model.cores[v] = q.reshape(bl, nb, -1).transpose(1, 0, 2) * c
        model.cores[v + 1] = np.einsum("ij,kjl->kil", r, model.cores[v + 1])
    else:
        q, r = np.linalg.qr(a.transpose(1, 0, 2).reshape(bl, nb * br).T)
        model.cores[v] = q.T.reshape(-1, nb, br).transpose(1, 0, 2) * c
        model.cores[v - 1] = np.einsum("kij,jl->kil", model.cores[v - 1], r.T)


def _train_sweep(target, model: TransferSTT, config: TrainingConfig,
                 rng: np.random.Generator) -> TrainingResult:
    """Block-coordinate stochastic gradient descent in an orthonormal gauge.

    The train is kept in mixed-canonical form around one active core, with
    every other core an isometry under the node measure. The stochastic
    gradient of the active core is then a well-conditioned direction; its
    step length is the minimizer of the batch loss along that direction,
    capped by the learning-rate schedule. The active core moves back and
    forth along the chain, one core per step.
    """
    n_vars = model.n_vars
    scales = [_orthonormal_scale(model.bases[v % model.n_fields]) for v in range(n_vars)]
    model = TransferSTT(model.n_slices, model.bases, [c.copy() for c in model.cores])
    for v in range(n_vars - 1, 0, -1):
        _shift_center(model, v, -1, scales)
    center, direction = 0, 1
    curve = []
    converged = False
    for step in range(config.max_steps):
        pts = sample_training_points(model.bases, n_vars, config.batch_size(step), rng)
        tgt = target(pts)
        grid = _NodeBatch(model, model._node_index(pts))
        left = grid.lefts(center)[center]
        right = grid.rights(center + 1)[center + 1]
        value = np.sum(grid.apply(left, center) * right, axis=1)
        resid = value - tgt
        current = float(np.mean(np.abs(resid) ** 2))
        curve.append(current)
        if not np.isfinite(current):
            raise TrainingDivergence(step, current)
        if current <= config.target_loss:
            converged = True
            break
        c2 = scales[center][:, None, None] ** 2
        grad = grid.core_gradient(center, resid[:, None] * left.conj(), right.conj()) * c2
        change = np.sum(grid.apply(left, center, mats=grid.node_values(center, grad)) * right, axis=1)
        norm = float(np.vdot(change, change).real)
        if norm > 0:
            eta = min(float(np.vdot(change, resid).real) / norm, config.rate(step))
            model.cores[center] = model.cores[center] - max(eta, 0.0) * grad
        if n_vars > 1:
            if not 0 <= center + direction < n_vars:
                direction = -direction
            _shift_center(model, center, direction, scales)
            center += direction
    logger.info("trained T_%d (sweep): %d steps, final loss %.3e", model.n_slices, len(curve),
                curve[-1] if curve else float("nan"))
    return TrainingResult(model, np.asarray(curve), converged)


class ExactTransfer:
    """Transfer function factored exactly on a finite set of slice frequencies.

    The bond index carries the value of the newest slice ``w_n`` (one of
    ``values``), so every linking matrix is a diagonal or a selector times
    elementary exponentials. Exact wherever the arguments belong to
    ``values``; used to isolate propagation errors from training residuals.
    """

    def __init__(self, n_slices: int, causal: np.ndarray, values: np.ndarray):
        values = np.atleast_2d(np.asarray(values, dtype=float))
        if n_slices > causal.shape[0]:
            raise ValueError("transfer function longer than the memory table")
        self.n_slices = n_slices
        self.causal = np.asarray(causal)[:n_slices]
        self.values = values
        self.n_fields = values.shape[1]

    @property
    def bond(self) -> int:
        return self.values.shape[0]

    @property
    def bonds(self) -> list[int]:
        # intra-slice bonds are trivial here: each slice is one linking matrix
        return [self.bond] * (self.n_slices - 1)

    def _index(self, omega) -> int:
        hit = np.flatnonzero(np.all(np.abs(self.values - np.asarray(omega, float)) <= 1e-12, axis=1))
        if hit.size == 0:
            raise KeyError(f"frequency {tuple(omega)} is not in the exact table")
        return int(hit[0])

    def linking(self, lag: int, omega: Sequence[float]) -> np.ndarray:
        w = np.asarray(omega, dtype=float)
        n = self.n_slices
        if not 0 <= lag < n:
            raise IndexError(f"lag {lag} outside transfer function of {n} slices")
        if lag == 0:
            head = np.exp(-(w @ self.causal[0] @ w))
            if n == 1:
                return np.array([[head]])
            row = np.zeros((1, self.bond), dtype=complex)
            row[0, self._index(w)] = head
            return row
        col = np.exp(-(self.values @ self.causal[lag] @ w))
        return np.diag(col) if lag < n - 1 else col[:, None]

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points).reshape(-1, self.n_slices, self.n_fields)
        out = np.empty(len(p), dtype=complex)
        for i, pt in enumerate(p):
            m = self.linking(0, pt[0])
            for lag in range(1, self.n_slices):
                m = m @ self.linking(lag, pt[lag])
            out[i] = m[0, 0]
        return out


@dataclass
class LinkingMatrixSet:
    """Transfer-function models for ``n = 1..M+1``; ``T_{M+1}`` is reused beyond."""

    transfers: list
    memory: int
    config_hash: str = ""
    curves: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.transfers) != self.memory + 1:
            raise ValueError(f"need {self.memory + 1} transfer functions, got {len(self.transfers)}")
        for n, t in enumerate(self.transfers, start=1):
            if t.n_slices != n:
                raise ValueError(f"transfer {n} has {t.n_slices} slices")

    @property
    def n_fields(self) -> int:
        return self.transfers[0].n_fields

    def transfer(self, m: int):
        return self.transfers[min(m, self.memory + 1) - 1]

    def gamma(self, m: int, k: int, omega) -> np.ndarray:
        """``Gamma_{m->k}(w)``; identity (1x1) outside the chain's support."""
        lag = m - k
        t = self.transfer(m)
        if lag < 0 or lag >= t.n_slices:
            return np.ones((1, 1))
        return t.linking(lag, omega)

    def closure(self, m: int, k: int) -> np.ndarray:
        """Row vector ``Gamma_{m->m}(0) ... Gamma_{m->k+1}(0)`` for an unfinished chain.

        ``T_m`` equals one whenever ``w_m = 0``, so closing the future slots
        at zero frequency drops chain ``m`` from the partial product.
        """
        zero = np.zeros(self.n_fields)
        out = np.ones((1, 1))
        for slot in range(m, k, -1):
            out = out @ self.gamma(m, slot, zero)
        return out

    @property
    def bond_schedule(self) -> list[list[int]]:
        return [list(t.bonds) for t in self.transfers]

    def save(self, path) -> None:
        write_linking_set(self, path)

    @classmethod
    def load(cls, path) -> "LinkingMatrixSet":
        return read_linking_set(path)


def exact_linking_set(causal: np.ndarray, values: np.ndarray, memory: int) -> LinkingMatrixSet:
    """Exact factors on the eigentable frequencies (plus zero, for closures)."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if not np.any(np.all(values == 0, axis=1)):
        values = np.vstack([np.zeros(values.shape[1]), values])
    return LinkingMatrixSet([ExactTransfer(n, causal, values) for n in range(1, memory + 2)], memory)


@dataclass
class KernelCore:
    """``K_k(w)``: ordered tensor product of ``Gamma_{m->k}(w)`` over contributing chains."""

    sets: LinkingMatrixSet
    step: int
    chains: list[int]

    def factors(self, omega) -> list[np.ndarray]:
        return [self.sets.gamma(m, self.step, omega) for m in self.chains]

    def dense(self, omega) -> np.ndarray:
        out = np.ones((1, 1))
        for f in self.factors(omega):
            out = np.kron(out, f)
        return out


def assemble_kernel_cores(sets: LinkingMatrixSet, n: int, n_steps: int) -> KernelCore:
    """Kernel core of step ``n`` in a horizon of ``n_steps`` steps.

    Chains ``m = n..min(n + M, n_steps)`` touch slice ``n``; identity-valued
    links of all other chains are dropped.
    """
    if not 1 <= n <= n_steps:
        raise ValueError(f"step {n} outside 1..{n_steps}")
    if any(isinstance(t, TransferSTT) and not t.cores for t in sets.transfers):
        raise ValueError("linking set is untrained")
    chains = list(range(n, min(n + sets.memory, n_steps) + 1))
    return KernelCore(sets, n, chains)


def kernel_product(sets: LinkingMatrixSet, omegas: np.ndarray) -> complex:
    """Contract ``K_N ... K_1`` densely at one frequency path (newest slice last)."""
    w = np.asarray(omegas, dtype=float).reshape(len(omegas), -1)
    n_steps = len(w)
    out = np.ones((1, 1))
    for k in range(n_steps, 0, -1):
        out = out @ assemble_kernel_cores(sets, k, n_steps).dense(w[k - 1])
    return complex(out[0, 0])


def chain_product(sets: LinkingMatrixSet, omegas: np.ndarray) -> complex:
    """``prod_m T_m`` evaluated chain by chain from the stored models."""
    w = np.asarray(omegas, dtype=float).reshape(len(omegas), -1)
    total = 1.0 + 0.0j
    for m in range(1, len(w) + 1):
        t = sets.transfer(m)
        pts = w[m - t.n_slices:m][::-1].reshape(1, -1)
        total *= complex(t.evaluate(pts)[0])
    return total


# -- binary container -------------------------------------------------------

MAGIC = b"QASPENLM"
VERSION = 1
_HEADER = struct.Struct("<8sHHHHB32s")


def write_linking_set(sets: LinkingMatrixSet, path) -> None:
    """Serialize trained Chebyshev transfer functions.

    Header: magic, version, n_basis, M, n_fields, dtype code, config hash;
    then per transfer function its bond schedule and domain map, followed by
    all coefficient stacks in slot/field order (C order).
    """
    models = sets.transfers
    if not all(isinstance(t, TransferSTT) for t in models):
        raise TypeError("only Chebyshev transfer functions can be serialized")
    is_complex = any(np.iscomplexobj(c) for t in models for c in t.cores)
    n_basis = models[0].bases[0].n_basis
    digest = bytes.fromhex(sets.config_hash) if sets.config_hash else bytes(32)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n_basis, sets.memory, sets.n_fields,
                              int(is_complex), digest.ljust(32, b"\0")[:32]))
        for t in models:
            fh.write(struct.pack("<H", t.n_slices))
            fh.write(np.asarray(t.bonds, dtype="<u2").tobytes())
            fh.write(np.asarray([[b.lo, b.hi] for b in t.bases], dtype="<f8").tobytes())
        for t in models:
            for c in t.cores:
                fh.write(np.ascontiguousarray(c, dtype="<c16" if is_complex else "<f8").tobytes())


def read_linking_set(path) -> LinkingMatrixSet:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, version, n_basis, memory, n_fields, is_complex, digest = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError("not a linking-matrix container")
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    pos = _HEADER.size
    layouts = []
    for _ in range(memory + 1):
        (n_slices,) = struct.unpack_from("<H", data, pos)
        pos += 2
        n_vars = n_slices * n_fields
        bonds = np.frombuffer(data, "<u2", n_vars - 1, pos).astype(int).tolist()
        pos += 2 * (n_vars - 1)
        dom = np.frombuffer(data, "<f8", 2 * n_fields, pos).reshape(n_fields, 2)
        pos += 16 * n_fields
        layouts.append((n_slices, bonds, [ChebyshevBasis(n_basis, lo, hi) for lo, hi in dom]))
    code = "<c16" if is_complex else "<f8"
    size = 16 if is_complex else 8
    transfers = []
    for n_slices, bonds, bases in layouts:
        dims = [1] + bonds + [1]
        cores = []
        for v in range(n_slices * n_fields):
            shape = (n_basis, dims[v], dims[v + 1])
            count = int(np.prod(shape))
            cores.append(np.frombuffer(data, code, count, pos).reshape(shape).copy())
            pos += size * count
        transfers.append(TransferSTT(n_slices, bases, cores))
    if pos != len(data):
        raise ValueError("trailing bytes in linking-matrix container")
    hexdigest = digest.hex() if any(digest) else ""
    return LinkingMatrixSet(transfers, memory, hexdigest)


def write_curve_csv(curve: Sequence[float], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("step,loss\n")
        for step, value in enumerate(curve):
            fh.write(f"{step},{value:.17g}\n")


def train_linking_set(causal: np.ndarray, bases: Sequence[ChebyshevBasis], memory: int,
                      config: TrainingConfig = TrainingConfig(), bond: int | None = None,
                      config_hash: str = "") -> LinkingMatrixSet:
    """Train ``T_1 .. T_{M+1}`` one after another; curves are kept per ``n``."""
    causal = np.asarray(causal)
    complex_valued = bool(np.iscomplexobj(causal) and np.any(causal.imag != 0))
    n_fields = len(bases)
    transfers, curves = [], []
    prev = None
    for n in range(1, memory + 2):
        seeded = TrainingConfig(**{**config.__dict__, "seed": config.seed + n - 1})
        if not np.any(causal[:n]):
            # kernel identically one: the noise-free constant start is exact
            model = TransferSTT.initialize(n, bases, bond or 1, np.random.default_rng(0), 0.0,
                                           complex_valued)
            transfers.append(model)
            curves.append(np.zeros(1))
            prev = model
            continue
        model = None
        if config.warm_start and prev is not None:
            model = prev.extended(np.random.default_rng(seeded.seed), config.init_noise)
        result = train(exact_target(causal, n, n_fields), n, bases, seeded, bond=bond,
                       complex_valued=complex_valued, model=model)
        transfers.append(result.model)
        curves.append(result.curve)
        prev = result.model
    return LinkingMatrixSet(transfers, memory, config_hash, curves)
