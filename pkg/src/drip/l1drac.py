"""L1 distributionally robust adaptive control as a sampled state machine.

One controller step at time t, with measured state y:

1. on the sampling grid t = i Ts (i >= 1) refresh the piecewise-constant
   estimate  Lambda_hat = lambda_s (1 - exp(lambda_s Ts))^-1 (y_hat - y)
   and its matched coefficients Theta_ad Lambda_hat; on [0, Ts) both are 0;
2. apply the current filter output u;
3. advance the predictor
   y_hat' = -lambda_s (y_hat - y) + f(t, y) + g(t)(pi_base(y) + u) + Lambda_hat
   by one explicit Euler substep;
4. advance the low-pass filter u' = -omega u - omega Theta_ad Lambda_hat
   exactly over the substep.

State arrays carry a leading batch axis so a whole chunk of trajectories is
advanced together.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .numerics import ContractViolation, nullspace_basis, solve_square


@dataclass(frozen=True)
class L1Config:
    omega: float = 20.0
    ts: float = 0.01
    lambda_s: float = 10.0
    adaptation_sign_variant: str = "verbatim"

    def __post_init__(self):
        if not (self.omega > 0 and self.ts > 0 and self.lambda_s > 0):
            raise ContractViolation("omega, ts and lambda_s must be positive")
        if self.adaptation_sign_variant not in ("verbatim", "negated_exponent"):
            raise ContractViolation(f"unknown adaptation variant {self.adaptation_sign_variant!r}")

    @property
    def adaptation_gain(self) -> float:
        # verbatim: lambda_s / (1 - e^{lambda_s Ts}) < 0
        e = self.lambda_s * self.ts
        if self.adaptation_sign_variant == "negated_exponent":
            e = -e
        return self.lambda_s / (1.0 - math.exp(e))


@dataclass
class L1State:
    y_hat: np.ndarray
    lambda_hat: np.ndarray
    lambda_hat_matched: np.ndarray
    u: np.ndarray
    last_sample_time: float = 0.0


def theta_ad(g) -> np.ndarray:
    """[I_m 0] [g  g_perp]^{-1}: extracts the matched coefficients of a vector in R^n."""
    g = np.atleast_2d(np.asarray(g, float))
    n, m = g.shape
    gbar = np.hstack([g, nullspace_basis(g)])
    return solve_square(gbar, np.eye(n))[:m]


def initial_state(x0, input_dim: int) -> L1State:
    x0 = np.array(x0, dtype=float, ndmin=2)
    B, n = x0.shape
    return L1State(x0.copy(), np.zeros((B, n)), np.zeros((B, input_dim)), np.zeros((B, input_dim)), 0.0)


def on_sampling_grid(t: float, ts: float) -> bool:
    i = round(t / ts)
    return abs(t - i * ts) <= 1e-9 * max(1.0, ts)


def predictor_step(state: L1State, sys, y, t: float, dt: float, config: L1Config,
                   baseline=None) -> np.ndarray:
    """One Euler substep of the process predictor; returns the new y_hat."""
    y = np.array(y, dtype=float, ndmin=2)
    g = sys.input_operator(t)
    u_total = state.u if baseline is None else baseline.evaluate(y) + state.u
    rate = (-config.lambda_s * (state.y_hat - y) + sys.nominal_drift(t, y)
            + u_total @ g.T + state.lambda_hat)
    return state.y_hat + dt * rate


def adaptation_update(state: L1State, y, t: float, config: L1Config, theta=None) -> L1State:
    """Refresh the piecewise-constant estimates at a sampling instant ``t = i Ts``."""
    if not on_sampling_grid(t, config.ts):
        raise ContractViolation(f"t={t} is not on the Ts={config.ts} sampling grid")
    y = np.array(y, dtype=float, ndmin=2)
    if round(t / config.ts) == 0:
        lam = np.zeros_like(state.y_hat)
    else:
        lam = config.adaptation_gain * (state.y_hat - y)
    matched = lam @ theta.T if theta is not None else lam
    return replace(state, lambda_hat=lam, lambda_hat_matched=matched, last_sample_time=float(t))


def filter_step(state: L1State, dt: float, omega: float) -> np.ndarray:
    """Exact step of u' = -omega u - omega c for c held constant; returns the new u."""
    decay = math.exp(-omega * dt)
    return decay * state.u - (1.0 - decay) * state.lambda_hat_matched


def l1_control(state: L1State, sys, y, t: float, dt: float, config: L1Config,
               baseline=None, theta=None):
    """Advance the controller one substep; returns (new_state, u applied on [t, t+dt))."""
    if theta is None:
        theta = theta_ad(sys.input_operator(t))
    if on_sampling_grid(t, config.ts):
        state = adaptation_update(state, y, t, config, theta)
    u_now = state.u
    y_hat = predictor_step(state, sys, y, t, dt, config, baseline)
    u_next = filter_step(state, dt, config.omega)
    return replace(state, y_hat=y_hat, u=u_next), u_now


class L1Controller:
    """Stateful wrapper around :func:`l1_control` for one batch of trajectories.

    ``dt`` is the integrator substep; ``Ts`` must be an integer multiple of it.
    """

    def __init__(self, sys, config: L1Config, dt: float, baseline=None, record: bool = False):
        ratio = config.ts / dt
        if ratio < 1 - 1e-9 or abs(ratio - round(ratio)) > 1e-6:
            raise ContractViolation(f"Ts={config.ts} is not an integer multiple of dt={dt}")
        self.sys = sys
        self.config = config
        self.dt = dt
        self.baseline = baseline
        self.record = record
        self.state = None
        self.trace = []
        # constant input operators only; time-varying g recomputes per call
        self._theta = theta_ad(sys.input_operator(0.0))

    def reset(self, X0):
        self.state = initial_state(X0, self.sys.input_dim)
        self.trace = []

    def __call__(self, t, X):
        if self.state is None:
            self.reset(X)
        if on_sampling_grid(t, self.config.ts):
            self.state = adaptation_update(self.state, X, t, self.config, self._theta)
        u_now = self.state.u
        if self.record:
            s = self.state
            self.trace.append((t, s.y_hat.copy(), s.lambda_hat.copy(), u_now.copy()))
        y_hat = predictor_step(self.state, self.sys, X, t, self.dt, self.config, self.baseline)
        u_next = filter_step(self.state, self.dt, self.config.omega)
        self.state = replace(self.state, y_hat=y_hat, u=u_next)
        return u_now

    def export_trace(self, path, knots=None, row: int = 0) -> Path:
        """CSV ``t,yhat1..n,lambdahat1..n,u1..m`` for one trajectory of the batch."""
        path = Path(path)
        n, m = self.sys.state_dim, self.sys.input_dim
        header = (["t"] + [f"yhat{i + 1}" for i in range(n)]
                  + [f"lambdahat{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)])
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t, yh, lam, u in self.trace:
                if knots is not None and not np.any(np.isclose(knots, t, atol=1e-9)):
                    continue
                w.writerow([repr(float(t))] + [repr(float(v)) for v in np.concatenate([yh[row], lam[row], u[row]])])
        return path


class DripControl:
    """Layered input pi_ad = pi_base(x) + pi_L1."""

    def __init__(self, sys, baseline, config: L1Config, dt: float):
        self.baseline = baseline
        self.l1 = L1Controller(sys, config, dt, baseline)

    def reset(self, X0):
        self.l1.reset(X0)

    def __call__(self, t, X):
        return self.baseline.evaluate(X) + self.l1(t, X)
