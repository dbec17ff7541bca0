"""Independent references: brute-force path sums, trajectory averages, dense algebra."""
from __future__ import annotations

import hashlib
import itertools
import json
import math
from typing import Mapping

import numpy as np
from scipy.linalg import expm

from .liouville import FreePropagator, LiouvilleSystem, devectorize, vectorize
from .noise import CorrelationMatrix, CorrelationSpec, build_correlation_matrix
from .propagator import ObservableSeries, series_from_states

PATH_BUDGET = 10**7
DENSE_DIM_LIMIT = 4
DENSE_STEP_LIMIT = 6


class BudgetExceeded(RuntimeError):
    pass


class CovarianceError(RuntimeError):
    def __init__(self, min_eigenvalue: float):
        self.min_eigenvalue = min_eigenvalue
        super().__init__(f"embedded covariance is not positive semidefinite "
                         f"(min eigenvalue {min_eigenvalue:.3e}); refine the time grid")


# -- path sum -----------------------------------------------------------------

def path_sum(ls: LiouvilleSystem, fp: FreePropagator, g: CorrelationMatrix | np.ndarray | None,
             n_steps: int, chunk: int = 1 << 14) -> np.ndarray:
    """Dense ``Phi_N`` summed over every eigenfrequency path.

    Each path ``(w_1, ..., w_N)`` contributes ``G0(w_N) ... G0(w_1)`` weighted
    by ``exp(-1/2 z^T G z)`` with ``z`` the interlaced path frequencies and
    ``G`` the full (untruncated as given) correlation matrix.
    """
    omegas = ls.omegas()
    n_ent = len(omegas)
    if n_ent ** n_steps > PATH_BUDGET:
        raise BudgetExceeded(f"{n_ent}^{n_steps} paths exceed the budget of {PATH_BUDGET}")
    if g is None:
        gmat = np.zeros((n_steps * omegas.shape[1],) * 2)
    elif isinstance(g, CorrelationMatrix):
        gmat = g.dense(n_steps)
    else:
        gmat = np.asarray(g)
    f = omegas.shape[1]
    if gmat.shape != (n_steps * f, n_steps * f):
        raise ValueError("correlation matrix does not match the path length")
    props = np.stack(fp.dense)
    dim = props.shape[1]
    total = np.zeros((dim, dim), dtype=complex)
    # split paths into an outer prefix (python loop) and a vectorized suffix
    inner = 1
    while inner < n_steps and n_ent ** (inner + 1) <= chunk:
        inner += 1
    outer = n_steps - inner
    suffixes = np.array(list(itertools.product(range(n_ent), repeat=inner)), dtype=int)
    if inner == 0:
        suffixes = np.zeros((1, 0), dtype=int)
    for prefix in itertools.product(range(n_ent), repeat=outer):
        prod = np.eye(dim, dtype=complex)
        for idx in prefix:
            prod = props[idx] @ prod
        paths = np.hstack([np.broadcast_to(np.array(prefix, dtype=int), (len(suffixes), outer)),
                           suffixes])
        z = omegas[paths].reshape(len(paths), -1)
        weight = np.exp(-0.5 * np.einsum("pi,ij,pj->p", z, gmat, z))
        acc = np.broadcast_to(prod, (len(paths), dim, dim))
        for step in range(outer, n_steps):
            acc = props[paths[:, step]] @ acc
        total += np.einsum("p,pij->ij", weight, acc)
    return total


def path_sum_series(ls: LiouvilleSystem, fp: FreePropagator, g: CorrelationMatrix | None,
                    n_steps: int, rho0: np.ndarray,
                    observables: Mapping[str, np.ndarray] | None = None) -> ObservableSeries:
    """Path-sum states ``Phi_k rho0`` for ``k = 1..N``."""
    hs = ls.hilbert
    d = hs.dim
    vec = vectorize(hs.pad(rho0))
    states = []
    for k in range(1, n_steps + 1):
        gk = None if g is None else g.dense(k)
        phi = path_sum(ls, fp, gk, k)
        states.append(devectorize(phi @ vec)[:d, :d])
    times = fp.tau * np.arange(1, n_steps + 1)
    return series_from_states(times, states, observables or {})


# -- dense references ---------------------------------------------------------

def dense_reference(op: str, *args):
    """Straightforward dense evaluation of a handful of identities.

    ``op`` is one of ``"expm"``, ``"kron"``, ``"mixed_product"``,
    ``"vec_roundtrip"``, ``"commutator"`` or ``"product"``.
    """
    arrays = [np.asarray(a) for a in args if isinstance(a, (np.ndarray, list))]
    for a in arrays:
        if a.ndim == 2 and a.shape[0] > DENSE_DIM_LIMIT ** 2:
            raise BudgetExceeded(f"dense reference limited to d <= {DENSE_DIM_LIMIT}")
    if op == "expm":
        return expm(np.asarray(args[0]))
    if op == "kron":
        out = np.ones((1, 1))
        for a in args:
            out = np.kron(out, a)
        return out
    if op == "mixed_product":
        a, b, c, e = args
        return np.kron(a, b) @ np.kron(c, e), np.kron(a @ c, b @ e)
    if op == "vec_roundtrip":
        return devectorize(vectorize(np.asarray(args[0])))
    if op == "commutator":
        h, a = args
        return h @ a - a @ h
    if op == "product":
        mats = list(args)
        if len(mats) > DENSE_STEP_LIMIT:
            raise BudgetExceeded(f"dense products limited to {DENSE_STEP_LIMIT} factors")
        out = np.eye(mats[0].shape[0], dtype=np.result_type(*mats))
        for m in mats:
            out = m @ out
        return out
    raise ValueError(f"unknown dense reference {op!r}")


def config_hash(config: Mapping) -> str:
    """SHA-256 of the canonical JSON form of a configuration mapping."""
    blob = json.dumps(config, sort_keys=True, default=_jsonable).encode()
    return hashlib.sha256(blob).hexdigest()


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, complex):
        return [x.real, x.imag]
    return str(x)


# -- trajectory sampling ------------------------------------------------------

def circulant_noise(row: np.ndarray, n_samples: int, rng: np.random.Generator,
                    tol: float = 1e-10) -> np.ndarray:
    """Real stationary Gaussian sequences with autocovariance ``row`` (lag 0, 1, ...).

    The Toeplitz covariance is embedded in a circulant of size ``2(n - 1)``
    whose spectrum comes from one FFT; a negative eigenvalue beyond ``tol``
    (relative) raises :class:`CovarianceError`.
    """
    row = np.asarray(row, dtype=float)
    n = len(row)
    if n == 1:
        if row[0] < 0:
            raise CovarianceError(float(row[0]))
        return np.sqrt(row[0]) * rng.standard_normal((n_samples, 1))
    circ = np.concatenate([row, row[-2:0:-1]])
    m = len(circ)
    lam = np.fft.fft(circ).real
    if lam.min() < -tol * max(lam.max(), 1e-300):
        raise CovarianceError(float(lam.min()))
    lam = np.clip(lam, 0.0, None)
    out = np.empty((n_samples, n))
    half = (n_samples + 1) // 2
    w = rng.standard_normal((half, m)) + 1j * rng.standard_normal((half, m))
    e = np.fft.fft(np.sqrt(lam / m) * w, axis=1)[:, :n]
    both = np.concatenate([e.real, e.imag])[:n_samples]
    out[:] = both
    return out


def takagi_factor(a: np.ndarray) -> np.ndarray:
    """``F`` with ``F @ F.T = a`` for a complex symmetric matrix ``a``.

    Uses the positive half of the spectrum of the real symmetric embedding
    ``[[Re a, Im a], [Im a, -Re a]]``.
    """
    a = np.asarray(a, dtype=complex)
    if np.max(np.abs(a - a.T)) > 1e-12 * max(1.0, np.abs(a).max()):
        raise ValueError("matrix is not complex symmetric")
    n = a.shape[0]
    h = np.block([[a.real, a.imag], [a.imag, -a.real]])
    ev, vec = np.linalg.eigh(h)
    pos = ev > 0
    u = vec[:n, pos] + 1j * vec[n:, pos]
    return u * np.sqrt(ev[pos])


def sample_bin_noise(g: CorrelationMatrix, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Bin-integrated field samples, shape ``(n_samples, N, n_fields)``.

    The pseudo-covariance ``E[z z^T]`` equals the symmetric part of ``G``, so
    averaging ``exp(-i z . w)`` reproduces ``exp(-1/2 w^T G w)``. Real
    stationary noise goes through circulant embedding; fields with a causal
    complex cross-correlation go through a Takagi factorization.
    """
    n, f = g.n_steps, g.n_fields
    if f == 1 and g.is_real:
        row = np.zeros(n)
        row[: g.memory + 1] = g.forward[: g.memory + 1, 0, 0].real
        try:
            return circulant_noise(row, n_samples, rng)[:, :, None]
        except CovarianceError:
            # the minimal embedding can fail for a valid Toeplitz matrix;
            # the dense factorization below decides
            pass
    dense = g.dense()
    sym = (dense + dense.T) / 2
    if np.all(np.isreal(sym)):
        ev = np.linalg.eigvalsh(sym.real)
        if ev.min() < -1e-10 * max(abs(ev).max(), 1e-300):
            raise CovarianceError(float(ev.min()))
    fac = takagi_factor(sym)
    w = rng.standard_normal((n_samples, fac.shape[1]))
    return (w @ fac.T).reshape(n_samples, n, f)


def sle_monte_carlo(ls: LiouvilleSystem, spec: CorrelationSpec | None, tau_fine: float, t_max: float,
                    n_traj: int, seed: int, rho0: np.ndarray,
                    observables: Mapping[str, np.ndarray] | None = None,
                    correlation: CorrelationMatrix | None = None,
                    chunk: int = 1000) -> ObservableSeries:
    """Average of stochastic Liouville trajectories with Gaussian fields.

    Each step of length ``tau_fine`` is the midpoint (Strang) exponential
    ``exp(-i L0 h/2) exp(-i sum_f eta_f L1_f) exp(-i L0 h/2)`` with ``eta`` the
    field integrated over the step. Trajectory blocks of ``chunk`` use their
    own Philox stream (the seed's key jumped ``2**128`` draws per block), so
    results do not depend on scheduling.
    ``correlation`` overrides the matrix built from ``spec`` (e.g. to study a
    truncated memory).
    """
    n_steps = int(round(t_max / tau_fine))
    if n_steps < 1 or not np.isclose(n_steps * tau_fine, t_max):
        raise ValueError("t_max must be a positive multiple of tau_fine")
    if n_traj < 2:
        raise ValueError("need at least two trajectories for error bars")
    if correlation is None:
        if spec is not None:
            correlation = build_correlation_matrix(spec, tau_fine, n_steps)
    hs = ls.hilbert
    d, dp = hs.dim, hs.padded_dim
    evals, evecs = np.linalg.eigh(hs.v)
    basis = np.stack([np.kron(evecs[:, b].conj(), evecs[:, a])
                      for a in range(dp) for b in range(dp)], axis=1)
    pair_minus = np.array([evals[a] - evals[b] for a in range(dp) for b in range(dp)])
    pair_plus = np.array([evals[a] + evals[b] for a in range(dp) for b in range(dp)])
    freqs = np.stack([pair_minus, pair_plus], axis=1)[:, : (correlation.n_fields if correlation else 1)]
    half = basis.conj().T @ expm(-0.5j * tau_fine * ls.l0) @ basis
    x0 = basis.conj().T @ vectorize(hs.pad(np.asarray(rho0, dtype=complex)))
    observables = dict(observables or {})
    # Tr(A rho) = vec(A^T) . vec(rho)
    readout = {k: (vectorize(hs.pad(a).T) @ basis) for k, a in observables.items()}
    readout["__trace__"] = vectorize(np.eye(dp)) @ basis
    sums = {k: np.zeros(n_steps) for k in readout}
    sq = {k: np.zeros(n_steps) for k in readout}
    # moments are accumulated about the first trajectory to avoid cancellation
    shift = {k: None for k in readout}
    rho_sum = np.zeros((n_steps, dp * dp), dtype=complex)
    n_chunks = math.ceil(n_traj / chunk)
    for c in range(n_chunks):
        size = min(chunk, n_traj - c * chunk)
        rng = np.random.Generator(np.random.Philox(key=seed).jumped(c))
        if correlation is None:
            eta = np.zeros((size, n_steps, 1))
        else:
            eta = sample_bin_noise(correlation, size, rng)
        x = np.broadcast_to(x0, (size, len(x0))).astype(complex)
        for k in range(n_steps):
            x = x @ half.T
            x = x * np.exp(-1j * eta[:, k, :] @ freqs.T)
            x = x @ half.T
            rho_sum[k] += x.sum(axis=0)
            for name, r in readout.items():
                val = (x @ r).real
                if c == 0 and k == 0:
                    shift[name] = np.zeros(n_steps)
                if c == 0:
                    shift[name][k] = val[0]
                val = val - shift[name][k]
                sums[name][k] += val.sum()
                sq[name][k] += (val ** 2).sum()
    centred = {k: v / n_traj for k, v in sums.items()}
    mean = {k: centred[k] + shift[k] for k in sums}
    se = {k: np.sqrt(np.maximum(sq[k] / n_traj - centred[k] ** 2, 0.0) / (n_traj - 1)) for k in sums}
    states = [devectorize(basis @ (rho_sum[k] / n_traj))[:d, :d] for k in range(n_steps)]
    times = tau_fine * np.arange(1, n_steps + 1)
    series = series_from_states(times, states, {k: v for k, v in observables.items()})
    series.values = {k: mean[k] for k in observables}
    series.errors = {k: se[k] for k in observables}
    series.errors["trace"] = se["__trace__"]
    return series
