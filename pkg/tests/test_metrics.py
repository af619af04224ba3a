import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drip.dynamics import benchmark_system, linear_system
from drip.l1drac import L1Config
from drip.metrics import (CertificationFailed, CouplingSpec, DeltaIssParams, GapReport, certify_contraction,
                          delta_iss_check, fd_jacobian, gap_decomposition, iss_bound, moment_bound, policy_gap,
                          tail_check, tail_order, theta_grid, total_gap, uncertainty_gap)
from drip.numerics import ContractViolation, RngStream
from drip.policy import MLPPolicy, expert_policy, mlp_matching_expert
from drip.simulate import InitialLaw, Partition

P = Partition(2.0, 20, 10)
LAW = InitialLaw("uniform_box", 4)


@pytest.fixture(scope="module")
def sys():
    return benchmark_system(0)


@pytest.fixture(scope="module")
def still():
    return benchmark_system(0, uncertainty_scale=0.0)


@pytest.fixture(scope="module")
def expert(sys):
    return expert_policy(sys.h, 2.0)


@pytest.fixture(scope="module")
def rough():
    return MLPPolicy.random([4, 8, 4], RngStream(7), weight_std=0.2, linear_skip=True)


def test_certify_benchmark(sys, expert):
    assert certify_contraction(sys, expert, 3.0) == pytest.approx(0.55, abs=1e-6)


def test_certify_linear_diagonal():
    sys = linear_system(np.diag([-1.0, -2.0]), np.eye(2))
    assert certify_contraction(sys, MLPPolicy([2, 2]), 1.0) == pytest.approx(1.0, abs=1e-6)


def test_certify_rejects_unstable(sys):
    flipped = expert_policy(sys.h, -2.0)
    with pytest.raises(CertificationFailed) as err:
        certify_contraction(sys, flipped, 3.0)
    assert err.value.worst_value > 0 and err.value.worst_point.shape == (4,)
    with pytest.raises(ContractViolation):
        certify_contraction(sys, flipped, 3.0, probes=100)


def test_fd_jacobian_linear():
    A = np.array([[1.0, 2.0], [-3.0, 0.5]])
    X = np.random.default_rng(0).standard_normal((5, 2))
    np.testing.assert_allclose(fd_jacobian(lambda t, Y: Y @ A.T, 0.0, X), np.broadcast_to(A, (5, 2, 2)),
                               atol=1e-10)


@pytest.mark.parametrize("coupling", [
    CouplingSpec("synchronous", LAW),
    CouplingSpec("independent", LAW, InitialLaw("gaussian", 4, center=(0.5, 0.0, 0.0, 0.0), std=0.3)),
    CouplingSpec("shifted", LAW, shift=(1.0, -1.0, 0.0, 0.0), scale=0.5),
])
def test_coupling_marginals(coupling):
    xi, xi_bar = coupling.sample(20_000, master_seed=3)
    for draws, (m, C) in zip((xi, xi_bar), coupling.marginal_moments()):
        se = np.sqrt(np.diag(C) / len(draws))
        assert np.all(np.abs(draws.mean(axis=0) - m) < 4 * se)
    if coupling.mode == "synchronous":
        np.testing.assert_array_equal(xi, xi_bar)


def test_coupling_rejects_bad_modes():
    with pytest.raises(ContractViolation):
        CouplingSpec("weird", LAW)
    with pytest.raises(ContractViolation):
        CouplingSpec("independent", LAW)


def test_policy_gap_of_expert_is_zero(sys, expert):
    xi = LAW.sample(10, RngStream(1))
    for scheme in ("rk4", "em"):
        rep = policy_gap(expert, expert, sys, xi, P, scheme=scheme)
        assert np.all(rep.gap_mean == 0.0) and rep.diverged_count == 0
    rep = policy_gap(mlp_matching_expert(expert), expert, sys, xi, P)
    assert rep.max_gap < 1e-12


def test_policy_gap_brute_force(sys, expert, rough):
    from drip.simulate import integrate_ode
    xi = LAW.sample(3, RngStream(2))
    rep = policy_gap(rough, expert, sys, xi, P)
    d = [np.linalg.norm(integrate_ode(sys, rough, x, P).states - integrate_ode(sys, expert, x, P).states, axis=1)
         for x in xi]
    np.testing.assert_allclose(rep.gap_mean, np.mean(d, axis=0), atol=1e-14)


def test_zero_uncertainty_gaps(still, expert, rough):
    cpl = CouplingSpec.default(LAW)
    assert uncertainty_gap(rough, None, still, cpl, 30, P).max_gap == 0.0
    assert uncertainty_gap(rough, L1Config(), still, cpl, 30, P).max_gap < 1e-6
    xi, _ = cpl.sample(30, 0)
    tot = total_gap(rough, None, expert, still, cpl, 30, P)
    pol = policy_gap(rough, expert, still, xi, P, scheme="em")
    np.testing.assert_allclose(tot.gap_mean, pol.gap_mean, rtol=0, atol=1e-12)
    with pytest.raises(ContractViolation):
        uncertainty_gap(rough, None, still, cpl, 29, P)


def test_decomposition_triangle(sys, expert, rough):
    dec = gap_decomposition(rough, L1Config(), expert, sys, CouplingSpec.default(LAW), 40, P, master_seed=4)
    assert dec.pathwise_violation() <= 1e-12 and dec.mean_violation() <= 1e-12
    assert dec.total.n_total == 40 and dec.uncertainty.max_gap > 0


def test_gap_report_csv(tmp_path):
    d = np.array([[0.0, 1.0], [0.0, 3.0], [np.nan, np.nan]])
    rep = GapReport(np.array([0.0, 1.0]), d, np.array([False, False, True]))
    np.testing.assert_allclose(rep.gap_mean, [0.0, 2.0])
    np.testing.assert_allclose(rep.moment(1), [0.0, math.sqrt(5.0)])
    assert rep.n_used == 2 and rep.max_gap == 2.0
    lines = rep.to_csv(tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "t,gap_mean,gap_se,p2_moment,p4_moment,p6_moment,diverged_count"
    assert lines[2].endswith(",1")


def test_iss_bound_examples():
    par = DeltaIssParams(0.55, 1.0, 0.525)
    assert par.lambda_theta == pytest.approx(1.1 - 0.525 ** 2)
    assert iss_bound(par, [0.0], 2.0, 5.0)[0] == 2.0
    assert iss_bound(par, [1e6], 2.0, 5.0)[0] == pytest.approx(5.0 * par.gain)
    with pytest.raises(ContractViolation):
        DeltaIssParams(0.55, 2 * 0.55 / 0.525 ** 2, 0.525)
    grid = theta_grid(0.55, 0.525)
    assert len(grid) == 20 and np.all(grid > 0) and np.all(grid < 2 * 0.55 / 0.525 ** 2)


def test_delta_iss_zero_and_decay(sys, expert):
    par = DeltaIssParams(0.55, 1.0, 0.525)
    zero = np.zeros((P.k, 4))
    x = np.array([0.5, -0.2, 0.1, 0.9])
    chk = delta_iss_check(sys, expert, zero, x, x, par, P)
    assert np.all(chk.lhs == 0.0)
    chk = delta_iss_check(sys, expert, zero, x, -x, par, P)
    np.testing.assert_allclose(chk.lhs, 2 * np.linalg.norm(x) * np.exp(-0.55 * P.knots), rtol=1e-8)
    assert chk.violations() == 0


@settings(max_examples=15, deadline=None)
@given(arrays(float, (20, 4), elements=st.floats(-1, 1)), st.integers(0, 19))
def test_delta_iss_random_perturbations(values, i):
    sys = benchmark_system(0)
    ex = expert_policy(sys.h, 2.0)
    theta = theta_grid(0.55, 0.525)[i]
    chk = delta_iss_check(sys, ex, values, np.ones(4), np.zeros(4), DeltaIssParams(0.55, theta, 0.525), P)
    assert chk.violations(1e-6) == 0


def test_moment_bound_examples():
    ens = np.zeros((5, 3, 2))
    ens[:, :, 0] = 2.0
    assert moment_bound(ens, 1) == pytest.approx(2.0)
    assert moment_bound(np.zeros((4, 3, 2)), 3) == 0.0
    with pytest.raises(ContractViolation):
        moment_bound(ens, 0)


@settings(max_examples=30, deadline=None)
@given(arrays(float, (6, 4, 2), elements=st.floats(-10, 10)))
def test_moment_bound_monotone_in_p(ens):
    vals = [moment_bound(ens, p) for p in (1, 2, 3)]
    assert vals[0] <= vals[1] * (1 + 1e-12) + 1e-300 and vals[1] <= vals[2] * (1 + 1e-12) + 1e-300


def test_tail_order_and_check():
    assert tail_order(0.1) == 2 and tail_order(0.05) == 2 and tail_order(0.01) == 3
    d = np.tile(np.linspace(0.0, 1.0, 5), (50, 1))
    chk = tail_check(GapReport(np.arange(5.0), d, np.zeros(50, bool)), 0.1)
    assert chk.p == 2 and chk.fraction == 0.0 and chk.passed
