"""Fugacities, their ordered product and density-matrix propagation.

A fugacity ``Z_k = sum_w G0(w) (x) K_k(w)`` is an MPO over the ``2q`` qubit
sites of Liouville space followed by one kernel site per open linking
chain. Chains are labelled by the transfer function they belong to, so
consecutive fugacities connect through the sites with equal labels.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import expm

from .liouville import (FreePropagator, LiouvilleSystem, devectorize, free_propagator,
                        tensorize_propagator, vectorize)
from .stt_kernel import KernelCore, LinkingMatrixSet, assemble_kernel_cores, exact_linking_set
from .ttcore import (BondDimensionError, SvdPolicy, TensorTrain, mpo_add, recompress, tensor_append,
                     tt_svd, zip_up)

logger = logging.getLogger(__name__)


@dataclass
class Fugacity:
    step: int
    mpo: TensorTrain
    chains: list[int]
    n_qubit_sites: int

    def dense(self) -> np.ndarray:
        """Liouville-space matrix with every kernel leg summed against ones.

        Only meaningful when all kernel legs are trivial (no memory), where it
        is the plain single-step propagator.
        """
        cores = list(self.mpo.cores[: self.n_qubit_sites])
        tail = np.ones((1, 1))
        for c in reversed(self.mpo.cores[self.n_qubit_sites:]):
            tail = np.einsum("apqb,b->a", c, tail[:, 0])[:, None] if c.shape[1:3] == (1, 1) else None
            if tail is None:
                raise ValueError("fugacity has open kernel legs")
        cores[-1] = np.tensordot(cores[-1], tail, axes=(-1, 0))
        return TensorTrain(cores).to_matrix()


def _check_bonds(tt: TensorTrain, policy: SvdPolicy) -> TensorTrain:
    if policy.max_bond is not None and tt.max_bond > policy.max_bond:
        raise BondDimensionError(tt.bonds, policy.max_bond)
    return tt


def build_fugacity(mpos: Sequence[TensorTrain], omegas: np.ndarray, core: KernelCore | None,
                   policy: SvdPolicy = SvdPolicy()) -> Fugacity:
    """Sum the free-propagator MPOs dressed with the kernel core of one step.

    Entries are added in eigentable order and the running sum is recompressed
    after every addition.
    """
    if len(mpos) != len(omegas):
        raise ValueError("one MPO per eigentable entry is required")
    n_sites = len(mpos[0])
    free_policy = SvdPolicy(policy.eps)
    total = None
    for mpo, w in zip(mpos, omegas):
        term = mpo
        if core is not None:
            for factor in core.factors(w):
                term = tensor_append(term, factor)
        total = term if total is None else recompress(mpo_add(total, term), free_policy)
    step = core.step if core is not None else 1
    chains = list(core.chains) if core is not None else []
    return Fugacity(step, _check_bonds(total, policy), chains, n_sites)


def _trivial_core(bond: int, rank: int) -> np.ndarray:
    eye = np.eye(bond)
    return eye.reshape((bond, 1, bond) if rank == 3 else (bond, 1, 1, bond))


def _pad_chains(tt: TensorTrain, have: list[int], want: list[int], n_qubit: int) -> TensorTrain:
    """Insert identity sites so the kernel sites of ``tt`` match ``want``."""
    rank = tt.cores[0].ndim
    cores = list(tt.cores[:n_qubit])
    src = dict(zip(have, tt.cores[n_qubit:]))
    extra = [m for m in have if m not in want]
    if extra:
        raise ValueError(f"chains {extra} are open but not continued")
    for m in want:
        if m in src:
            cores.append(src[m])
        else:
            cores.append(_trivial_core(cores[-1].shape[-1], rank))
    return TensorTrain(cores)


def _drop_trivial(tt: TensorTrain, chains: list[int], n_qubit: int) -> tuple[TensorTrain, list[int]]:
    """Absorb kernel sites whose physical legs have collapsed to size one."""
    cores = list(tt.cores)
    keep = []
    idx = n_qubit
    for m in chains:
        c = cores[idx]
        if all(s == 1 for s in c.shape[1:-1]):
            mat = c.reshape(c.shape[0], c.shape[-1])
            cores[idx - 1] = np.tensordot(cores[idx - 1], mat, axes=(-1, 0))
            del cores[idx]
        else:
            keep.append(m)
            idx += 1
    return TensorTrain(cores), keep


def _close_chains(tt: TensorTrain, chains: list[int], n_qubit: int,
                  vectors: Sequence[np.ndarray]) -> TensorTrain:
    """Contract each kernel site with a closure row vector and absorb it."""
    cores = list(tt.cores[:n_qubit])
    tail = np.ones((1, 1))
    for c, vec in reversed(list(zip(tt.cores[n_qubit:], vectors))):
        phys = np.tensordot(c, vec[0], axes=(1, 0))  # (a, [in,] b)
        if phys.ndim == 3:
            if phys.shape[1] != 1:
                raise ValueError("closing an operator leg with open input")
            phys = phys[:, 0, :]
        tail = phys @ tail
    cores[-1] = np.tensordot(cores[-1], tail, axes=(-1, 0))
    return TensorTrain(cores)


@dataclass
class Propagator:
    """``Phi_N = Z_N ... Z_1`` as an MPO over the qubit sites."""

    mpo: TensorTrain
    n_steps: int
    tau: float
    memory: int
    bond_log: list[tuple[int, int, int]] = field(default_factory=list)

    def dense(self) -> np.ndarray:
        return self.mpo.to_matrix()

    def apply(self, rho: np.ndarray) -> np.ndarray:
        d = rho.shape[0]
        full = self.dense()
        dd = int(round(np.sqrt(full.shape[0])))
        padded = np.zeros((dd, dd), dtype=complex)
        padded[:d, :d] = rho
        return devectorize(full @ vectorize(padded))[:d, :d]


def build_propagator(fugacities: Sequence[Fugacity], policy: SvdPolicy = SvdPolicy(),
                     tau: float = float("nan"), memory: int = 0) -> Propagator:
    """Zip up ``Z_N ... Z_1`` keeping positive time ordering (later steps to the left)."""
    if not fugacities:
        raise ValueError("need at least one fugacity")
    n_qubit = fugacities[0].n_qubit_sites
    first = fugacities[0]
    acc, chains = _drop_trivial(first.mpo, first.chains, n_qubit)
    log = [(1, acc.max_bond, acc.nbytes)]
    for z in fugacities[1:]:
        padded = _pad_chains(acc, chains, z.chains, n_qubit)
        acc = _check_bonds(zip_up(z.mpo, padded, policy), policy)
        acc, chains = _drop_trivial(acc, z.chains, n_qubit)
        log.append((z.step, acc.max_bond, acc.nbytes))
    if chains:
        raise ValueError(f"chains {chains} remain open after the last fugacity")
    return Propagator(acc, len(fugacities), tau, memory, log)


@dataclass
class Dynamics:
    """Everything needed to generate fugacities on demand for ``n_steps`` steps."""

    liouville: LiouvilleSystem
    free: FreePropagator
    mpos: list[TensorTrain]
    sets: LinkingMatrixSet | None
    n_steps: int
    policy: SvdPolicy

    @property
    def tau(self) -> float:
        return self.free.tau

    @property
    def memory(self) -> int:
        return self.sets.memory if self.sets is not None else 0

    @property
    def n_qubit_sites(self) -> int:
        return 2 * self.liouville.hilbert.qubits

    def kernel_core(self, k: int) -> KernelCore | None:
        if self.sets is None:
            return None
        return assemble_kernel_cores(self.sets, k, self.n_steps)

    def fugacity(self, k: int) -> Fugacity:
        return build_fugacity(self.mpos, self.liouville.omegas(), self.kernel_core(k), self.policy)

    def fugacities(self) -> list[Fugacity]:
        return [self.fugacity(k) for k in range(1, self.n_steps + 1)]

    def propagator(self) -> Propagator:
        return build_propagator(self.fugacities(), self.policy, self.tau, self.memory)


def make_dynamics(ls: LiouvilleSystem, tau: float, sets: LinkingMatrixSet | None, n_steps: int,
                  policy: SvdPolicy = SvdPolicy(1e-10)) -> Dynamics:
    fp = free_propagator(ls, tau)
    mpos = tensorize_propagator(fp, policy.eps)
    return Dynamics(ls, fp, mpos, sets, n_steps, policy)


def markov_linking_set(ls: LiouvilleSystem, gamma: float, tau: float) -> LinkingMatrixSet:
    """Memoryless kernel ``exp(-gamma tau w^2 / 2)`` on the eigentable."""
    table = np.array([[[gamma * tau / 2]]])
    return exact_linking_set(table, ls.omegas(), 0)


def markov_propagator(ls: LiouvilleSystem, gamma: float, t: float) -> np.ndarray:
    """Dense ``exp(-i t L0 - t gamma L1^2 / 2)``."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    l1 = ls.couplings["minus"]
    return expm(-1j * t * ls.l0 - 0.5 * t * gamma * (l1 @ l1))


# -- propagation --------------------------------------------------------------

@dataclass
class ObservableSeries:
    times: np.ndarray
    values: dict[str, np.ndarray]
    trace_dev: np.ndarray
    herm_dev: np.ndarray
    errors: dict[str, np.ndarray] | None = None
    states: list[np.ndarray] | None = None

    def to_csv(self, path, header_line: str | None = None) -> None:
        names = list(self.values)
        cols = ["t"] + names
        if self.errors:
            cols += [f"{n}_se" for n in names]
        cols += ["trace_dev", "herm_dev"]
        with open(path, "w", newline="") as fh:
            if header_line:
                fh.write(f"# {header_line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for i, t in enumerate(self.times):
                row = [t] + [self.values[n][i] for n in names]
                if self.errors:
                    row += [self.errors[n][i] for n in names]
                row += [self.trace_dev[i], self.herm_dev[i]]
                w.writerow([f"{x:.12g}" for x in row])


def state_diagnostics(rho: np.ndarray) -> tuple[float, float]:
    return abs(np.trace(rho) - 1.0), float(np.max(np.abs(rho - rho.conj().T)))


def series_from_states(times, states, observables: Mapping[str, np.ndarray]) -> ObservableSeries:
    values = {name: np.array([np.trace(a @ r).real for r in states]) for name, a in observables.items()}
    diag = np.array([state_diagnostics(r) for r in states])
    return ObservableSeries(np.asarray(times, float), values, diag[:, 0], diag[:, 1], states=list(states))


def _check_density(rho: np.ndarray) -> None:
    rho = np.asarray(rho)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError("density matrix must be square")
    if np.max(np.abs(rho - rho.conj().T)) > 1e-10:
        raise ValueError("density matrix is not Hermitian")
    if abs(np.trace(rho) - 1) > 1e-10:
        raise ValueError("density matrix does not have unit trace")
    if np.linalg.eigvalsh((rho + rho.conj().T) / 2).min() < -1e-10:
        raise ValueError("density matrix is not positive semidefinite")


def propagate(dyn: Dynamics, rho0: np.ndarray, observables: Mapping[str, np.ndarray] | None = None,
              renormalize: bool = False, keep_states: bool = False,
              bond_log: list | None = None) -> ObservableSeries:
    """Apply ``Z_1, Z_2, ...`` to ``vec(rho0)`` and record the series.

    The running state is an MPS over the qubit sites plus one site per open
    linking chain. Reading out ``<rho(t_k)>`` closes the open chains at zero
    frequency.
    """
    _check_density(rho0)
    hs = dyn.liouville.hilbert
    rho0 = np.asarray(rho0, dtype=complex)
    if rho0.shape[0] != hs.dim:
        raise ValueError(f"initial state has dimension {rho0.shape[0]}, system has {hs.dim}")
    n_qubit = dyn.n_qubit_sites
    vec = vectorize(hs.pad(rho0)).reshape([2] * n_qubit)
    state = tt_svd(vec, SvdPolicy(dyn.policy.eps))
    chains: list[int] = []
    d = hs.dim
    states, times = [], []
    for k in range(1, dyn.n_steps + 1):
        z = dyn.fugacity(k)
        padded = _pad_chains(state, chains, z.chains, n_qubit)
        state = _check_bonds(zip_up(z.mpo, padded, dyn.policy), dyn.policy)
        state, chains = _drop_trivial(state, z.chains, n_qubit)
        if dyn.sets is not None and chains:
            closing = [dyn.sets.closure(m, k) for m in chains]
            closed = _close_chains(state, chains, n_qubit, closing)
        else:
            closed = state
        rho = devectorize(closed.to_vector())[:d, :d]
        if renormalize:
            tr = np.trace(rho)
            rho = rho / tr
            state = state * (1 / tr)
        states.append(rho)
        times.append(k * dyn.tau)
        if bond_log is not None:
            bond_log.append((k, max(state.max_bond, z.mpo.max_bond), state.nbytes + z.mpo.nbytes))
    series = series_from_states(times, states, observables or {})
    if not keep_states:
        series.states = None
    return series


def write_bond_log(log: Sequence[tuple[int, int, int]], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("step,max_bond,bytes\n")
        for step, bond, nbytes in log:
            fh.write(f"{step},{bond},{nbytes}\n")
