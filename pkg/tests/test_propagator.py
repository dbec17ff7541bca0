import numpy as np
import pytest
from scipy.linalg import expm

from qaspen.liouville import (HilbertSystem, build_liouville, free_propagator, pauli, spin_boson,
                              tensorize_propagator)
from qaspen.noise import CorrelationSpec, SpectralDensity, build_correlation_matrix
from qaspen.oracle import path_sum_series
from qaspen.propagator import (ObservableSeries, build_fugacity, build_propagator,
                               make_dynamics, markov_linking_set, markov_propagator, propagate,
                               write_bond_log)
from qaspen.stt_kernel import assemble_kernel_cores, exact_linking_set
from qaspen.ttcore import BondDimensionError, SvdPolicy

SX, SY, SZ = pauli()
PAULI = {"sx": SX, "sy": SY, "sz": SZ}
UP = np.array([[1, 0], [0, 0]], dtype=complex)
SB_SPEC = CorrelationSpec("intrinsic", 1.0, SpectralDensity("ohmic", 1.0))


@pytest.fixture(scope="module")
def sb_extrinsic():
    return build_liouville(spin_boson(), "extrinsic")


@pytest.fixture(scope="module")
def sb_intrinsic():
    return build_liouville(spin_boson(), "intrinsic")


def markov_step(ls, gamma, tau):
    half = expm(-0.5j * tau * ls.l0)
    l1 = ls.couplings["minus"]
    return half @ expm(-0.5 * gamma * tau * l1 @ l1) @ half


def test_markov_fugacity_closed_form(sb_extrinsic):
    ls, gamma, tau = sb_extrinsic, 1.0, 0.25
    dyn = make_dynamics(ls, tau, markov_linking_set(ls, gamma, tau), 1)
    z = dyn.fugacity(1)
    assert z.chains == [1]
    assert np.allclose(z.dense(), markov_step(ls, gamma, tau), atol=1e-12)


def test_unit_kernel_gives_free_step(sb_extrinsic):
    dyn = make_dynamics(sb_extrinsic, 0.3, None, 1)
    assert np.allclose(dyn.fugacity(1).dense(), expm(-0.3j * sb_extrinsic.l0), atol=1e-12)


def test_fugacity_with_memory_matches_dense_sum(sb_intrinsic):
    ls, tau = sb_intrinsic, 0.25
    table = build_correlation_matrix(SB_SPEC, tau, 5, 4).causal
    sets = exact_linking_set(table, ls.omegas(), 4)
    fp = free_propagator(ls, tau)
    mpos = tensorize_propagator(fp, 1e-12)
    core = assemble_kernel_cores(sets, 1, 5)
    z = build_fugacity(mpos, ls.omegas(), core, SvdPolicy(1e-12))
    ref = sum(np.kron(g, core.dense(w)) for g, w in zip(fp.dense, ls.omegas()))
    got = z.mpo.to_matrix()
    assert np.linalg.norm(got - ref) <= 1e-8 * np.linalg.norm(ref)


def test_fugacity_bond_cap_reports(sb_intrinsic):
    ls = sb_intrinsic
    table = build_correlation_matrix(SB_SPEC, 0.25, 3, 2).causal
    sets = exact_linking_set(table, ls.omegas(), 2)
    dyn = make_dynamics(ls, 0.25, sets, 3, SvdPolicy(1e-10, max_bond=1))
    with pytest.raises(BondDimensionError):
        dyn.fugacity(1)


def test_fugacity_needs_one_mpo_per_entry(sb_extrinsic):
    mpos = tensorize_propagator(free_propagator(sb_extrinsic, 0.1), 1e-10)
    with pytest.raises(ValueError):
        build_fugacity(mpos[:-1], sb_extrinsic.omegas(), None)


def test_single_step_propagator(sb_extrinsic):
    dyn = make_dynamics(sb_extrinsic, 0.25, markov_linking_set(sb_extrinsic, 1.0, 0.25), 1)
    phi = dyn.propagator()
    assert phi.n_steps == 1
    assert np.allclose(phi.dense(), dyn.fugacity(1).dense(), atol=1e-12)
    with pytest.raises(ValueError):
        build_propagator([])


def test_markov_power(sb_extrinsic):
    ls = sb_extrinsic
    dyn = make_dynamics(ls, 0.25, markov_linking_set(ls, 1.0, 0.25), 3)
    z = markov_step(ls, 1.0, 0.25)
    assert np.allclose(dyn.propagator().dense(), z @ z @ z, atol=1e-10)


def test_zero_coupling_is_unitary():
    ls = build_liouville(HilbertSystem(SX + 0.3 * SZ, np.zeros((2, 2))))
    dyn = make_dynamics(ls, 0.2, markov_linking_set(ls, 1.0, 0.2), 5)
    phi = dyn.propagator().dense()
    assert np.allclose(phi, expm(-1.0j * ls.l0), atol=1e-12)
    assert np.allclose(phi.conj().T @ phi, np.eye(4), atol=1e-12)


def test_stationary_state_is_constant():
    ls = build_liouville(HilbertSystem(0.7 * SZ, 0.5 * SZ))
    dyn = make_dynamics(ls, 0.25, markov_linking_set(ls, 1.0, 0.25), 6)
    series = propagate(dyn, np.eye(2) / 2, PAULI)
    for v in series.values.values():
        assert np.allclose(v, 0, atol=1e-12)
    assert np.all(series.trace_dev <= 1e-12)


def test_path_sum_agreement_with_exact_kernel(sb_intrinsic):
    ls, tau, n = sb_intrinsic, 0.25, 4
    g = build_correlation_matrix(SB_SPEC, tau, n, n - 1)
    sets = exact_linking_set(g.causal, ls.omegas(), n - 1)
    series = propagate(make_dynamics(ls, tau, sets, n), UP, PAULI)
    ref = path_sum_series(ls, free_propagator(ls, tau), g, n, UP, PAULI)
    for k in PAULI:
        assert np.max(np.abs(series.values[k] - ref.values[k])) <= 1e-6
    assert np.allclose(series.times, [0.25, 0.5, 0.75, 1.0])


def test_renormalize_flag_fixes_trace(sb_intrinsic):
    ls, tau = sb_intrinsic, 0.25
    g = build_correlation_matrix(SB_SPEC, tau, 6, 2)
    sets = exact_linking_set(g.causal, ls.omegas(), 2)
    plain = propagate(make_dynamics(ls, tau, sets, 6), UP, PAULI)
    fixed = propagate(make_dynamics(ls, tau, sets, 6), UP, PAULI, renormalize=True)
    assert np.all(fixed.trace_dev <= 1e-12)
    assert np.all(plain.herm_dev <= 1e-6)


@pytest.mark.parametrize("bad", [np.eye(2), np.array([[1, 1], [0, 0]]), np.diag([1.5, -0.5]),
                                 np.eye(3) / 3])
def test_rejects_invalid_initial_state(sb_extrinsic, bad):
    dyn = make_dynamics(sb_extrinsic, 0.25, None, 1)
    with pytest.raises(ValueError):
        propagate(dyn, bad)


def test_markov_propagator_limits():
    ls = build_liouville(spin_boson())
    assert np.allclose(markov_propagator(ls, 0.0, 0.7), expm(-0.7j * ls.l0))
    with pytest.raises(ValueError):
        markov_propagator(ls, -1.0, 1.0)


@pytest.mark.parametrize("t", [0.3, 1.0, 2.2])
def test_pure_dephasing(t):
    ls = build_liouville(HilbertSystem(np.zeros((2, 2)), 0.75 * SZ))
    rho = np.full((2, 2), 0.5, dtype=complex)
    out = (markov_propagator(ls, 1.0, t) @ rho.reshape(-1, order="F")).reshape(2, 2, order="F")
    assert out[0, 1] == pytest.approx(0.5 * np.exp(-1.125 * t), abs=1e-12)


def test_lindblad_generator_identity():
    ls = build_liouville(spin_boson())
    gen = -1j * ls.l0 - 0.5 * 0.8 * ls.couplings["minus"] @ ls.couplings["minus"]
    t, h = 0.9, 1e-5
    deriv = (markov_propagator(ls, 0.8, t + h) - markov_propagator(ls, 0.8, t - h)) / (2 * h)
    assert np.allclose(deriv, gen @ markov_propagator(ls, 0.8, t), atol=1e-8)


def test_markov_product_approaches_lindblad():
    ls = build_liouville(spin_boson())
    errs = []
    for n in (4, 8, 16, 32):
        tau = 1.0 / n
        dyn = make_dynamics(ls, tau, markov_linking_set(ls, 1.0, tau), n)
        errs.append(np.linalg.norm(dyn.propagator().dense() - markov_propagator(ls, 1.0, 1.0), 2))
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_csv_exports(tmp_path):
    series = ObservableSeries(np.array([0.25, 0.5]), {"sz": np.array([1.0, 0.5])},
                              np.array([0.0, 1e-4]), np.array([0.0, 0.0]))
    series.to_csv(tmp_path / "obs.csv", header_line="config_hash=abc")
    lines = (tmp_path / "obs.csv").read_text().splitlines()
    assert lines[0] == "# config_hash=abc"
    assert lines[1] == "t,sz,trace_dev,herm_dev"
    assert lines[3] == "0.5,0.5,0.0001,0"
    write_bond_log([(1, 4, 1024), (2, 8, 4096)], tmp_path / "bonds.csv")
    assert (tmp_path / "bonds.csv").read_text() == "step,max_bond,bytes\n1,4,1024\n2,8,4096\n"


def test_fugacity_build_is_bitwise_reproducible(sb_intrinsic):
    table = build_correlation_matrix(SB_SPEC, 0.25, 3, 2).causal
    sets = exact_linking_set(table, sb_intrinsic.omegas(), 2)
    a = make_dynamics(sb_intrinsic, 0.25, sets, 3).fugacity(2).mpo
    b = make_dynamics(sb_intrinsic, 0.25, sets, 3).fugacity(2).mpo
    assert all(np.array_equal(x, y) for x, y in zip(a.cores, b.cores))


def test_bond_log_is_recorded(sb_intrinsic):
    table = build_correlation_matrix(SB_SPEC, 0.25, 5, 2).causal
    sets = exact_linking_set(table, sb_intrinsic.omegas(), 2)
    log = []
    propagate(make_dynamics(sb_intrinsic, 0.25, sets, 5), UP, bond_log=log)
    assert [row[0] for row in log] == [1, 2, 3, 4, 5]
    assert all(row[1] >= 1 and row[2] > 0 for row in log)
