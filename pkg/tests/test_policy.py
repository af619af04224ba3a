import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drip.dynamics import benchmark_system
from drip.numerics import RngStream, log_norm_2
from drip.policy import (MLPPolicy, PerturbationSignal, ShiftedPolicy, estimate_lipschitz, expert_policy,
                         load_checkpoint, mlp_matching_expert, perturbation_psi, perturbation_theta,
                         save_checkpoint)
from drip.simulate import Partition, integrate_ode


@pytest.fixture(scope="module")
def sys():
    return benchmark_system(0)


@pytest.fixture(scope="module")
def expert(sys):
    return expert_policy(sys.h, 2.0)


def fd_policy_jacobian(pi, X, h=1e-6):
    n = X.shape[1]
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        cols.append((pi.evaluate(X + e) - pi.evaluate(X - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def test_zero_weight_network():
    pi = MLPPolicy([4, 8, 3])
    layers, _ = pi.unpack()
    layers[-1][1][:] = [1.0, -2.0, 0.5]
    X = np.random.default_rng(0).standard_normal((5, 4))
    np.testing.assert_array_equal(pi.evaluate(X), np.tile([1.0, -2.0, 0.5], (5, 1)))
    np.testing.assert_array_equal(pi.state_jacobian(X), 0.0)


def test_single_linear_layer():
    W = np.arange(12.0).reshape(3, 4)
    pi = MLPPolicy.from_layers([(W, np.zeros(3))])
    X = np.random.default_rng(0).standard_normal((5, 4))
    np.testing.assert_array_equal(pi.state_jacobian(X), np.broadcast_to(W, (5, 3, 4)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32), st.booleans())
def test_jacobian_matches_finite_differences(seed, skip):
    pi = MLPPolicy.random([4, 16, 4], RngStream(seed), bias_std=0.3, linear_skip=skip)
    if skip:
        pi.params[-16:] = np.random.default_rng(seed).standard_normal(16)
    X = np.random.default_rng(seed + 1).uniform(-2, 2, (8, 4))
    J = pi.state_jacobian(X)
    fd = fd_policy_jacobian(pi, X)
    assert np.max(np.abs(J - fd)) <= 1e-5 * max(1.0, np.abs(J).max())


def test_random_init_scale():
    pi = MLPPolicy.random([100, 200, 4], RngStream(3))
    (W1, b1), _ = pi.unpack()[0]
    assert W1.std() == pytest.approx(0.1, rel=0.05)
    assert np.all(b1 == 0)


def test_expert_conventions(sys, expert):
    X = np.random.default_rng(1).uniform(-3, 3, (50, 4))
    closed = sys.closed_loop_drift(0.0, X, expert.evaluate(X))
    np.testing.assert_allclose(closed, -0.55 * X, atol=1e-14)
    c = sys.h.evaluate(np.zeros(4))
    np.testing.assert_allclose(expert.evaluate(np.zeros(4)), c)
    np.testing.assert_allclose(expert_policy(sys.h, 2.0, "subtract_h").evaluate(np.zeros(4)), -c)
    J = sys.nominal_drift_jacobian(0.0, X) + sys.input_operator(0.0) @ expert.state_jacobian(X)
    assert np.all(log_norm_2(J) <= -0.55 + 1e-8)


def test_expert_matching_mlp(expert):
    mlp = mlp_matching_expert(expert)
    X = np.random.default_rng(2).uniform(-3, 3, (50, 4))
    np.testing.assert_allclose(mlp.evaluate(X), expert.evaluate(X), atol=1e-13)
    np.testing.assert_allclose(mlp.state_jacobian(X), expert.state_jacobian(X), atol=1e-13)


def test_perturbation_theta(sys, expert):
    P = Partition(2.0, 20, 5)
    x0 = np.array([1.0, -0.5, 0.3, 0.8])
    assert perturbation_theta(expert, expert, integrate_ode(sys, expert, x0, P)).max_norm() == 0.0
    c = np.array([0.1, -0.2, 0.0, 0.3])
    shifted = ShiftedPolicy(expert, offset=c)
    sig = perturbation_theta(shifted, expert, integrate_ode(sys, shifted, x0, P))
    np.testing.assert_allclose(sig.values, np.tile(c, (20, 1)), atol=1e-14)
    pi = MLPPolicy.random([4, 8, 4], RngStream(5))
    traj = integrate_ode(sys, pi, x0, P)
    sig = perturbation_theta(pi, expert, traj)
    brute = max(np.linalg.norm(pi.evaluate(x) - expert.evaluate(x)) for x in traj.states[:-1])
    assert sig.max_norm() == pytest.approx(brute, rel=1e-14)


def test_theta_reintegration_identity(sys, expert):
    """Rolling out pi* plus Theta reproduces the pi_hat trajectory at the knots."""
    P = Partition(2.0, 200, 1)
    x0 = np.array([1.0, -0.5, 0.3, 0.8])
    pi = MLPPolicy.random([4, 8, 4], RngStream(5))
    traj = integrate_ode(sys, pi, x0, P)
    sig = perturbation_theta(pi, expert, traj)
    # piecewise-constant Theta is exact only as the partition is refined; compare on a fine grid
    again = integrate_ode(sys, expert, x0, P, extra_input=sig)
    assert np.max(np.abs(again.states - traj.states)) < 1e-2


def test_perturbation_psi(sys, expert):
    P = Partition(2.0, 20, 5)
    traj = integrate_ode(sys, expert, np.ones(4), P)
    sig = perturbation_psi(expert, expert, traj)
    assert sig.max_norm() == 0.0 and np.all(sig.jacobian_mismatch == 0)
    L = np.arange(16.0).reshape(4, 4) / 10
    sig = perturbation_psi(ShiftedPolicy(expert, gain=L), expert, traj)
    np.testing.assert_allclose(sig.jacobian_mismatch, np.broadcast_to(L, (20, 4, 4)), atol=1e-14)
    pi = MLPPolicy.random([4, 8, 4], RngStream(9))
    sig = perturbation_psi(pi, expert, traj)
    fd = fd_policy_jacobian(pi, traj.states[:-1]) - fd_policy_jacobian(expert, traj.states[:-1])
    np.testing.assert_allclose(sig.jacobian_mismatch, fd, atol=1e-5)


def test_lipschitz_estimates():
    W = np.array([[1.0, 2.0], [0.0, -1.0]])
    lin = MLPPolicy.from_layers([(W, np.zeros(2))])
    L_pi, L_dpi = estimate_lipschitz(lin, 2.0, 2000)
    assert L_pi == pytest.approx(np.linalg.norm(W, 2) * 1.05, rel=1e-12)
    assert L_dpi < 1e-6
    assert estimate_lipschitz(MLPPolicy([2, 2]), 1.0, 1000) == (0.0, 0.0)
    pi = MLPPolicy.random([4, 16, 4], RngStream(1), weight_std=0.5, bias_std=0.5)
    a = estimate_lipschitz(pi, 3.0, 2000, seed=1)
    b = estimate_lipschitz(pi, 3.0, 20000, seed=2)
    assert all(np.isfinite(a)) and abs(b[0] - a[0]) / b[0] < 0.1 and abs(b[1] - a[1]) / b[1] < 0.1


def test_checkpoint_roundtrip(tmp_path):
    pi = MLPPolicy.random([4, 8, 4], RngStream(2), linear_skip=True)
    jpath, bpath = save_checkpoint(pi, tmp_path / "pol")
    assert bpath.stat().st_size == 8 * pi.n_params
    back = load_checkpoint(jpath)
    np.testing.assert_array_equal(back.params, pi.params)
    assert back.widths == pi.widths and back.linear_skip


def test_perturbation_signal_max_norm():
    assert PerturbationSignal(np.array([[3.0, 4.0], [0.0, 1.0]])).max_norm() == 5.0
