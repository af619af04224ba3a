import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drip.dynamics import benchmark_system, linear_system
from drip.l1drac import (L1Config, L1Controller, adaptation_update, filter_step, initial_state, l1_control,
                         predictor_step, theta_ad)
from drip.numerics import ContractViolation, RankDeficient, nullspace_basis
from drip.policy import expert_policy
from drip.simulate import Partition, em_batch


def scalar_plant(c=0.0):
    return linear_system([[0.0]], [[1.0]], drift_uncertainty=lambda t, X: np.full_like(X, c))


def test_theta_ad_examples():
    np.testing.assert_allclose(theta_ad(0.25 * np.eye(4)), 4.0 * np.eye(4), atol=1e-14)
    np.testing.assert_allclose(theta_ad(np.array([[1.0], [0.0]])), [[1.0, 0.0]], atol=1e-14)
    with pytest.raises(RankDeficient):
        theta_ad(np.zeros((3, 1)))


@settings(max_examples=40, deadline=None)
@given(arrays(float, (5, 2), elements=st.floats(-3, 3)))
def test_theta_ad_identities(g):
    if np.linalg.svd(g, compute_uv=False).min() < 1e-3:
        return
    th = theta_ad(g)
    np.testing.assert_allclose(th @ g, np.eye(2), atol=1e-10)
    np.testing.assert_allclose(th @ nullspace_basis(g), 0.0, atol=1e-10)


def test_predictor_equilibrium():
    sys = linear_system([[0.0]], [[1.0]])
    st0 = initial_state([[0.3]], 1)
    assert predictor_step(st0, sys, [[0.3]], 0.0, 0.01, L1Config())[0, 0] == 0.3


def test_predictor_geometric_convergence():
    sys = linear_system([[0.0]], [[1.0]])
    cfg = L1Config(lambda_s=50.0)
    dt = 0.01
    s = replace(initial_state([[0.0]], 1), y_hat=np.array([[1.0]]))
    errs = [1.0]
    for _ in range(5):
        s = replace(s, y_hat=predictor_step(s, sys, [[0.0]], 0.0, dt, cfg))
        errs.append(s.y_hat[0, 0])
    np.testing.assert_allclose(np.array(errs[1:]) / np.array(errs[:-1]), 1 - 50.0 * dt, rtol=1e-12)


def test_predictor_hand_computed():
    sys = linear_system([[-2.0, 1.0], [0.0, -1.0]], [[1.0], [0.5]])
    cfg = L1Config(lambda_s=10.0)
    s = replace(initial_state([[0.0, 0.0]], 1), y_hat=np.array([[1.0, 2.0]]), u=np.array([[0.4]]),
                lambda_hat=np.array([[0.1, -0.3]]))
    y = np.array([0.5, 1.0])
    dt = 0.01
    f = np.array([-2.0 * 0.5 + 1.0, -1.0])
    rate = -10.0 * (np.array([1.0, 2.0]) - y) + f + np.array([1.0, 0.5]) * 0.4 + np.array([0.1, -0.3])
    np.testing.assert_allclose(predictor_step(s, sys, y[None], 0.0, dt, cfg)[0], [1.0, 2.0] + dt * rate,
                               rtol=1e-15)


def test_adaptation_examples():
    cfg = L1Config(lambda_s=10.0, ts=0.01)
    th = np.eye(2)
    s = initial_state([[1.0, 2.0]], 2)
    out = adaptation_update(s, [[1.0, 2.0]], 0.03, cfg, th)
    assert np.all(out.lambda_hat == 0) and np.all(out.lambda_hat_matched == 0)
    off = replace(s, y_hat=np.array([[1.5, 2.0]]))
    assert np.all(adaptation_update(off, [[1.0, 2.0]], 0.0, cfg, th).lambda_hat == 0)
    eps = 1e-3
    out = adaptation_update(replace(s, y_hat=np.array([[1.0 + eps, 2.0]])), [[1.0, 2.0]], 0.01, cfg, th)
    coeff = 10.0 / (1.0 - math.exp(0.1))
    assert coeff == pytest.approx(-95.083, abs=1e-3)
    np.testing.assert_allclose(out.lambda_hat, [[coeff * eps, 0.0]], rtol=1e-9)
    with pytest.raises(ContractViolation):
        adaptation_update(s, [[1.0, 2.0]], 0.015, cfg, th)


def test_filter_examples():
    omega, dt, c = 20.0, 0.001, 0.7
    s = replace(initial_state([[0.0]], 1), lambda_hat_matched=np.array([[c]]))
    for i in range(1, 301):
        s = replace(s, u=filter_step(s, dt, omega))
        if i % 50 == 0:
            assert s.u[0, 0] == pytest.approx(-c * (1 - math.exp(-omega * i * dt)), rel=1e-12)
    s = replace(initial_state([[0.0]], 1), u=np.array([[2.0]]))
    assert filter_step(s, 0.05, omega)[0, 0] == pytest.approx(2.0 * math.exp(-1.0), rel=1e-14)
    s = replace(initial_state([[0.0]], 1), u=np.array([[0.3]]), lambda_hat_matched=np.array([[-1.1]]))
    half = replace(s, u=filter_step(s, 0.005, omega))
    assert filter_step(half, 0.005, omega)[0, 0] == pytest.approx(filter_step(s, 0.01, omega)[0, 0], rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.floats(1.0, 100.0), st.floats(1e-4, 0.05))
def test_filter_dc_gain_bound(levels, omega, dt):
    s = initial_state([[0.0]], 1)
    for c in levels:
        s = replace(s, lambda_hat_matched=np.array([[c]]))
        for _ in range(3):
            s = replace(s, u=filter_step(s, dt, omega))
            assert abs(s.u[0, 0]) <= max(abs(v) for v in levels) * (1 + 1e-12)


def test_predictor_error_contracts():
    sys = linear_system([[0.0, 0.0], [0.0, 0.0]], [[1.0], [0.0]])
    cfg = L1Config(lambda_s=10.0)
    s = replace(initial_state([[0.0, 0.0]], 1), y_hat=np.array([[1.0, -2.0]]))
    prev = np.inf
    for _ in range(50):
        s = replace(s, y_hat=predictor_step(s, sys, [[0.0, 0.0]], 0.0, 0.01, cfg))
        err = np.linalg.norm(s.y_hat)
        assert err < prev
        prev = err


def test_l1_control_zero_uncertainty_benchmark():
    sys = benchmark_system(0, uncertainty_scale=0.0)
    ex = expert_policy(sys.h, 2.0)
    P = Partition(10.0, 100, 10)
    ctrl = L1Controller(sys, L1Config(), P.dt, baseline=ex)
    X = np.array([[0.8, -0.4, 0.2, 1.0]])
    ctrl.reset(X)
    umax = 0.0
    for j in range(P.steps):
        u = ctrl(j * P.dt, X)
        umax = max(umax, float(np.abs(u).max()))
        X = X + P.dt * sys.closed_loop_drift(j * P.dt, X, ex.evaluate(X) + u)
    assert umax < 1e-6


def test_l1_control_function_matches_controller():
    sys = scalar_plant(1.0)
    cfg = L1Config(ts=0.01)
    dt = 0.001
    y = np.array([[0.0]])
    s = initial_state(y, 1)
    ctrl = L1Controller(sys, cfg, dt)
    ctrl.reset(y)
    for j in range(40):
        s, u_fn = l1_control(s, sys, y, j * dt, dt, cfg)
        u_obj = ctrl(j * dt, y)
        np.testing.assert_array_equal(u_fn, u_obj)
        y = y + dt * (u_fn + 1.0)


def test_trace_piecewise_constant_and_zero_start(tmp_path):
    sys = scalar_plant(1.0)
    P = Partition(0.5, 50, 10)
    cfg = L1Config(ts=0.005)
    ctrl = L1Controller(sys, cfg, P.dt, record=True)
    em_batch(sys, ctrl, np.zeros((1, 1)), P, np.zeros((1, P.steps, 1)))
    times = np.array([r[0] for r in ctrl.trace])
    lam = np.array([r[2][0, 0] for r in ctrl.trace])
    u = np.array([r[3][0, 0] for r in ctrl.trace])
    first = times < cfg.ts - 1e-12
    assert np.all(lam[first] == 0) and np.all(u[times <= cfg.ts + 1e-12] == 0)
    interval = np.floor(times / cfg.ts + 1e-9).astype(int)
    for i in np.unique(interval):
        assert np.ptp(lam[interval == i]) == 0.0
    path = ctrl.export_trace(tmp_path / "trace.csv", P.knots)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,yhat1,lambdahat1,u1" and len(lines) == 1 + P.k + 1


def test_controller_requires_integer_ratio():
    with pytest.raises(ContractViolation):
        L1Controller(scalar_plant(), L1Config(ts=0.015), 0.01)
    with pytest.raises(ContractViolation):
        L1Config(omega=-1.0)
