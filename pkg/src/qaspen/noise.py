"""Gaussian noise statistics and their discretized correlation matrices.

Extrinsic noise is one real field ``xi(t)``. Intrinsic noise is the pair
``(xi, nu)`` whose correlation block is

    [[S'(t - t'),  2i theta(t - t') S''(t - t')],
     [0,           0                          ]]

with ``S(t) = int_0^inf dw J(w) [cos(wt) coth(beta w / 2) - i sin(wt)]``.
The kernel only sees the symmetric part of the block through the quadratic
form ``1/2 w^T G w``.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

QUAD_ABS_TOL = 1e-10


class QuadratureError(RuntimeError):
    """An integral failed to reach its tolerance."""


@dataclass(frozen=True)
class SpectralDensity:
    """Bath spectral density ``J(w)``, zero for ``w <= 0``.

    ``kind="ohmic"`` is ``scale * w * exp(-w / cutoff)``; ``kind="tabulated"``
    linearly interpolates ``table`` (columns ``w, J``) and vanishes outside it.
    """

    kind: str = "ohmic"
    cutoff: float = 1.0
    scale: float = 1.0
    table: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind == "ohmic":
            if not self.cutoff > 0:
                raise ValueError("cutoff frequency must be positive")
        elif self.kind == "tabulated":
            tab = np.asarray(self.table, dtype=float)
            if tab.ndim != 2 or tab.shape[1] != 2 or tab.shape[0] < 2:
                raise ValueError("tabulated density needs an (n, 2) table")
            if np.any(np.diff(tab[:, 0]) <= 0):
                raise ValueError("tabulated frequencies must be strictly increasing")
            if np.any(tab[:, 0] < 0) or np.any(tab[:, 1] < 0):
                raise ValueError("tabulated density must be non-negative on w >= 0")
            object.__setattr__(self, "table", tab)
        else:
            raise ValueError(f"unknown spectral density kind {self.kind!r}")

    @classmethod
    def from_file(cls, path: str | Path) -> "SpectralDensity":
        """Read a two-column text file of ``w, J(w)`` pairs."""
        return cls(kind="tabulated", table=np.loadtxt(path, ndmin=2))

    @property
    def omega_max(self) -> float:
        if self.kind == "ohmic":
            return 60.0 * self.cutoff
        return float(self.table[-1, 0])

    def __call__(self, w):
        w = np.asarray(w, dtype=float)
        if self.kind == "ohmic":
            return np.where(w > 0, self.scale * w * np.exp(-np.abs(w) / self.cutoff), 0.0)
        tab = self.table
        return np.where(w > 0, np.interp(w, tab[:, 0], tab[:, 1], left=0.0, right=0.0), 0.0)

    def over_omega(self, w):
        """``J(w) / w`` with its finite limit at ``w -> 0``."""
        w = np.asarray(w, dtype=float)
        if self.kind == "ohmic":
            return self.scale * np.exp(-np.abs(w) / self.cutoff)
        tab = self.table
        ratio = np.interp(w, tab[:, 0], tab[:, 1], left=0.0, right=0.0) / np.where(w > 0, w, 1.0)
        if tab[0, 0] > 0:
            slope0 = tab[0, 1] / tab[0, 0]
        else:
            slope0 = (tab[1, 1] - tab[0, 1]) / (tab[1, 0] - tab[0, 0])
        return np.where(w > 0, ratio, slope0)


@dataclass(frozen=True)
class CorrelationSpec:
    """Statistics of one noise source.

    ``mode="extrinsic"`` is the real high-temperature field with
    ``C(t) = (1/beta) int dw J(w) cos(wt) / w``; ``mode="intrinsic"`` is the
    detailed-balance pair built from ``S(t)``. ``white`` replaces the
    spectral density by delta-correlated noise of strength ``gamma`` and
    ``correlation`` overrides ``C(t)`` (``S(t)`` for intrinsic) directly.
    """

    mode: str = "extrinsic"
    beta: float = 1.0
    density: SpectralDensity | None = None
    white: float | None = None
    correlation: Callable[[float], complex] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.mode not in ("extrinsic", "intrinsic"):
            raise ValueError(f"unknown noise mode {self.mode!r}")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.white is not None:
            if self.white < 0:
                raise ValueError("white-noise strength must be non-negative")
            if self.mode != "extrinsic":
                raise ValueError("white noise is only defined for the extrinsic mode")
        elif self.density is None and self.correlation is None:
            raise ValueError("need a spectral density, a correlation function or white noise")

    @property
    def n_fields(self) -> int:
        return 2 if self.mode == "intrinsic" else 1


def _quad_fourier(f: Callable, t: float, kind: str, upper: float) -> float:
    opts = dict(epsabs=QUAD_ABS_TOL / 10, epsrel=1e-12, limit=500, full_output=1)
    if t == 0.0:
        if kind == "sin":
            return 0.0
        res = integrate.quad(f, 0.0, upper, **opts)
    else:
        res = integrate.quad(f, 0.0, upper, weight=kind, wvar=abs(t), **opts)
    value, err = res[0], res[1]
    if len(res) > 3 and err > QUAD_ABS_TOL * 10:
        raise QuadratureError(f"quadrature did not converge at t={t}: error {err:.2e}")
    return value * (np.sign(t) if kind == "sin" else 1.0)


def _x_coth(w: float, beta: float) -> float:
    # w coth(beta w / 2), finite at w = 0
    x = beta * w / 2
    if abs(x) < 1e-8:
        return 2.0 / beta
    return w / np.tanh(x)


def correlation_function(spec: CorrelationSpec, t: float) -> complex:
    """Two-time correlation ``C(t)`` of the ``xi`` field (``S(t)`` for intrinsic)."""
    t = float(t)
    if not np.isfinite(t):
        raise ValueError("t must be finite")
    if spec.correlation is not None:
        return complex(spec.correlation(t))
    if spec.white is not None:
        raise ValueError("white noise has no pointwise correlation function")
    return _cached_correlation(spec.mode, spec.beta, spec.density, t)


def _segment_fourier(f: Callable, t: float, kind: str, edges: np.ndarray) -> float:
    # Gauss-Legendre on every table segment; the integrand is smooth between knots,
    # which an adaptive rule with a global oscillatory weight cannot exploit.
    def rule(order):
        x, w = _gauss_legendre(order)
        mid = (edges[1:] + edges[:-1])[:, None] / 2
        half = (edges[1:] - edges[:-1])[:, None] / 2
        nodes = mid + half * x
        trig = np.cos(t * nodes) if kind == "cos" else np.sin(t * nodes)
        return float(np.sum(half * w * f(nodes) * trig))

    fine, coarse = rule(16), rule(8)
    if abs(fine - coarse) > QUAD_ABS_TOL * 10:
        raise QuadratureError(f"tabulated quadrature did not converge at t={t}")
    return fine


@functools.lru_cache(maxsize=65536)
def _cached_correlation(mode: str, beta: float, density: SpectralDensity, t: float) -> complex:
    if density.kind == "tabulated":
        edges = density.table[:, 0]
        if edges[0] > 0:
            edges = np.concatenate([[0.0], edges])
        xcoth = np.vectorize(lambda w: _x_coth(w, beta))
        if mode == "extrinsic":
            return complex(_segment_fourier(density.over_omega, t, "cos", edges) / beta)
        real = _segment_fourier(lambda w: density.over_omega(w) * xcoth(w), t, "cos", edges)
        imag = -_segment_fourier(density, t, "sin", edges)
        return complex(real, imag)
    upper = density.omega_max
    if mode == "extrinsic":
        return complex(_quad_fourier(lambda w: float(density.over_omega(w)), t, "cos", upper) / beta)
    real = _quad_fourier(lambda w: float(density.over_omega(w)) * _x_coth(w, beta), t, "cos", upper)
    imag = -_quad_fourier(lambda w: float(density(w)), t, "sin", upper)
    return complex(real, imag)


_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gauss_legendre(order: int) -> tuple[np.ndarray, np.ndarray]:
    if order not in _GL_CACHE:
        _GL_CACHE[order] = np.polynomial.legendre.leggauss(order)
    return _GL_CACHE[order]


def _interval_rule(f: Callable, a: float, b: float, order: int) -> complex:
    x, w = _gauss_legendre(order)
    mid, half = (a + b) / 2, (b - a) / 2
    return half * sum(wi * f(mid + half * xi) for xi, wi in zip(x, w))


def _adaptive(f: Callable, a: float, b: float, order: int, tol: float, depth: int = 0) -> complex:
    coarse = _interval_rule(f, a, b, order)
    fine = _interval_rule(f, a, b, 2 * order)
    if abs(fine - coarse) <= tol:
        return fine
    if depth >= 12:
        raise QuadratureError(f"lag integral on [{a}, {b}] did not converge")
    m = (a + b) / 2
    return (_adaptive(f, a, m, order, tol / 2, depth + 1)
            + _adaptive(f, m, b, order, tol / 2, depth + 1))


def lag_integral(f: Callable[[float], complex], lag: int, tau: float,
                 order: int = 16, tol: float = 1e-11) -> complex:
    """``int_{I_k} ds int_{I_l} ds' f(s - s')`` for ``k - l = lag``.

    The square is folded onto the difference variable, leaving the
    triangular weight ``tau - |v|`` on ``v in [-tau, tau]``; each half is
    integrated with Gauss-Legendre rules refined until two orders agree.
    """
    g = lambda v: (tau - abs(v)) * f(lag * tau + v)  # noqa: E731
    return _adaptive(g, -tau, 0.0, order, tol) + _adaptive(g, 0.0, tau, order, tol)


@dataclass(frozen=True)
class CorrelationMatrix:
    """Discretized correlation blocks of ``n_fields`` noise fields.

    ``forward[D]`` is the ``(n_fields, n_fields)`` block ``G_{k, k-D}`` and
    ``backward[D]`` the block ``G_{k-D, k}``; lags beyond ``memory`` are zero.
    ``causal[D]`` is the symmetrized causal table used by transfer functions:
    ``causal[0] = (G_0 + G_0^T) / 4`` and ``causal[D] = (G_D + G_{-D}^T) / 2``.
    """

    tau: float
    n_steps: int
    memory: int
    forward: np.ndarray
    backward: np.ndarray
    modes: tuple[str, ...] = ("extrinsic",)

    @property
    def n_fields(self) -> int:
        return self.forward.shape[1]

    @property
    def causal(self) -> np.ndarray:
        out = np.empty((self.memory + 1,) + self.forward.shape[1:], dtype=complex)
        out[0] = (self.forward[0] + self.forward[0].T) / 4
        for lag in range(1, self.memory + 1):
            out[lag] = (self.forward[lag] + self.backward[lag].T) / 2
        return out

    @property
    def is_real(self) -> bool:
        return bool(np.all(np.isreal(self.forward)) and np.all(np.isreal(self.backward)))

    def block(self, k: int, l: int) -> np.ndarray:
        lag = k - l
        if abs(lag) > self.memory:
            return np.zeros((self.n_fields,) * 2, dtype=self.forward.dtype)
        return self.forward[lag] if lag >= 0 else self.backward[-lag]

    def dense(self, n_steps: int | None = None) -> np.ndarray:
        """Full matrix with slices ordered ``1..N`` and fields interlaced per slice."""
        n = self.n_steps if n_steps is None else n_steps
        f = self.n_fields
        out = np.zeros((n * f, n * f), dtype=self.forward.dtype)
        for k in range(n):
            for l in range(n):
                out[k * f:(k + 1) * f, l * f:(l + 1) * f] = self.block(k, l)
        return out

    def truncated(self, memory: int) -> "CorrelationMatrix":
        memory = min(memory, self.memory)
        fwd, bwd = self.forward.copy(), self.backward.copy()
        fwd[memory + 1:] = 0
        bwd[memory + 1:] = 0
        return CorrelationMatrix(self.tau, self.n_steps, memory, fwd, bwd, self.modes)

    def exponent(self, omegas: np.ndarray) -> complex:
        """``1/2 w^T G w`` for frequencies of shape ``(N, n_fields)``."""
        z = np.asarray(omegas, dtype=float).reshape(-1)
        g = self.dense(len(z) // self.n_fields)
        return complex(0.5 * z @ g @ z)

    def causal_exponent(self, omegas: np.ndarray) -> complex:
        """``sum_n sum_D w_n^T causal[D] w_{n-D}``; equals :meth:`exponent`."""
        w = np.asarray(omegas, dtype=float).reshape(-1, self.n_fields)
        table = self.causal
        total = 0.0 + 0.0j
        for n in range(len(w)):
            for lag in range(min(n, self.memory) + 1):
                total += w[n] @ table[lag] @ w[n - lag]
        return complex(total)


def build_correlation_matrix(spec: CorrelationSpec, tau: float, n_steps: int,
                             memory: int | None = None) -> CorrelationMatrix:
    """Bin-integrated correlation blocks ``G_{k,l}`` on the grid ``t_k = k tau``."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    if memory is None:
        memory = n_steps - 1
    if n_steps < 1 or memory < 0 or memory + 1 > n_steps:
        raise ValueError(f"need 1 <= memory + 1 <= n_steps, got memory={memory}, n_steps={n_steps}")
    f = spec.n_fields
    dtype = complex if spec.mode == "intrinsic" else float
    fwd = np.zeros((n_steps, f, f), dtype=dtype)
    bwd = np.zeros((n_steps, f, f), dtype=dtype)
    if spec.white is not None:
        fwd[0, 0, 0] = bwd[0, 0, 0] = spec.white * tau
        return CorrelationMatrix(tau, n_steps, memory, fwd, bwd, (spec.mode,))

    corr = lambda t: correlation_function(spec, t)  # noqa: E731
    for lag in range(memory + 1):
        if spec.mode == "extrinsic":
            g = lag_integral(lambda t: corr(t).real, lag, tau)
            fwd[lag, 0, 0] = bwd[lag, 0, 0] = g.real
        else:
            sym = lag_integral(lambda t: corr(abs(t)).real, lag, tau)
            cross = lag_integral(lambda t: 2j * corr(t).imag if t > 0 else 0.0, lag, tau)
            fwd[lag] = [[sym, cross], [0.0, 0.0]]
            bwd[lag] = [[sym, 0.0], [0.0, 0.0]]
    bwd[0] = fwd[0]
    return CorrelationMatrix(tau, n_steps, memory, fwd, bwd, (spec.mode,))


def assemble_multinoise(blocks: Sequence[CorrelationMatrix],
                        cross: dict[tuple[int, int], CorrelationMatrix] | None = None
                        ) -> CorrelationMatrix:
    """Stack several noise sources into one interlaced correlation matrix.

    Fields of the same time slice stay adjacent. ``cross[(i, j)]`` gives the
    correlation between the first field of source ``i`` and the first field
    of source ``j`` (one-field matrix); the reverse block follows from
    stationarity. Undeclared cross blocks are zero.
    """
    if not blocks:
        raise ValueError("need at least one correlation matrix")
    ref = blocks[0]
    for b in blocks[1:]:
        if (b.tau, b.n_steps, b.memory) != (ref.tau, ref.n_steps, ref.memory):
            raise ValueError("all blocks must share tau, n_steps and memory")
    if len(blocks) == 1 and not cross:
        return ref
    offsets = np.cumsum([0] + [b.n_fields for b in blocks])
    f = int(offsets[-1])
    dtype = np.result_type(*[b.forward.dtype for b in blocks],
                           *[c.forward.dtype for c in (cross or {}).values()])
    fwd = np.zeros((ref.n_steps, f, f), dtype=dtype)
    bwd = np.zeros_like(fwd)
    for b, o in zip(blocks, offsets[:-1]):
        fwd[:, o:o + b.n_fields, o:o + b.n_fields] = b.forward
        bwd[:, o:o + b.n_fields, o:o + b.n_fields] = b.backward
    for (i, j), c in (cross or {}).items():
        if c.n_fields != 1:
            raise ValueError("cross correlations are given between single fields")
        if (c.tau, c.n_steps) != (ref.tau, ref.n_steps):
            raise ValueError("cross correlation discretization does not match")
        a, b = offsets[i], offsets[j]
        fwd[:, a, b] = c.forward[:, 0, 0]
        bwd[:, a, b] = c.backward[:, 0, 0]
        fwd[:, b, a] = c.backward[:, 0, 0]
        bwd[:, b, a] = c.forward[:, 0, 0]
    modes = tuple(m for b in blocks for m in b.modes)
    return CorrelationMatrix(ref.tau, ref.n_steps, ref.memory, fwd, bwd, modes)
