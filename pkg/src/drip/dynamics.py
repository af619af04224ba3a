"""Known and unknown vector fields, the 4-D benchmark, and growth-bound fitting.

A system is described by four batched maps:

    nominal_drift(t, X)          (B, n)  known drift f
    input_operator(t)            (n, m)  known input matrix g
    drift_uncertainty(t, X)      (B, n)  unknown Lambda_mu
    diffusion_uncertainty(t, X)  (B, n, d) unknown Lambda_sigma
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ContractViolation, RngStream, derive_seed
from .policy import MLPPolicy


class NonFiniteField(ValueError):
    """A vector field returned NaN/Inf on a finite probe."""


class SystemBundle:
    state_dim: int
    input_dim: int
    noise_dim: int
    horizon: float = 10.0

    def nominal_drift(self, t, X):
        raise NotImplementedError

    def input_operator(self, t):
        raise NotImplementedError

    def drift_uncertainty(self, t, X):
        raise NotImplementedError

    def diffusion_uncertainty(self, t, X):
        raise NotImplementedError

    def closed_loop_drift(self, t, X, U):
        """f(t, X) + g(t) U, batched."""
        return self.nominal_drift(t, X) + U @ self.input_operator(t).T


class FunctionSystem(SystemBundle):
    """System assembled from user callables; missing uncertainties are zero."""

    def __init__(self, state_dim, input_dim, drift, input_operator, drift_uncertainty=None,
                 diffusion_uncertainty=None, noise_dim=None, horizon=10.0):
        self.state_dim = int(state_dim)
        self.input_dim = int(input_dim)
        self.noise_dim = int(noise_dim if noise_dim is not None else state_dim)
        self._f = drift
        self._g = input_operator
        self._mu = drift_uncertainty
        self._sigma = diffusion_uncertainty
        self.horizon = horizon

    def nominal_drift(self, t, X):
        return np.asarray(self._f(t, X), dtype=float)

    def input_operator(self, t):
        return np.asarray(self._g(t), dtype=float)

    def drift_uncertainty(self, t, X):
        if self._mu is None:
            return np.zeros_like(X)
        return np.asarray(self._mu(t, X), dtype=float)

    def diffusion_uncertainty(self, t, X):
        if self._sigma is None:
            return np.zeros(X.shape[:-1] + (self.state_dim, self.noise_dim))
        return np.asarray(self._sigma(t, X), dtype=float)


def linear_system(A, B, drift_uncertainty=None, diffusion_uncertainty=None, noise_dim=None):
    A = np.atleast_2d(np.asarray(A, float))
    B = np.atleast_2d(np.asarray(B, float))
    return FunctionSystem(A.shape[0], B.shape[1], lambda t, X: X @ A.T, lambda t: B,
                          drift_uncertainty, diffusion_uncertainty, noise_dim)


@dataclass(frozen=True)
class BenchmarkParams:
    h_seed: int = 0
    h_hidden: int = 16
    h_weight_std: float = 0.5
    drift_coeff: float = 0.05
    input_gain: float = 0.25
    mu_base: float = 0.1
    mu_slope: float = 0.05
    sigma_base: float = 0.1
    sigma_slope: float = 0.05
    lambda_mu_reading: str = "ones"
    uncertainty_scale: float = 1.0
    horizon: float = 10.0


class BenchmarkSystem(SystemBundle):
    """f(X) = -a X - c h(X), g = c I, Lambda_mu = (mu0 + mu1 |X|) 1 (or X), Lambda_sigma = (s0 + s1 |X|^0.5) I.

    ``h`` is a frozen 4 -> 16 -> 4 tanh network with N(0, std^2) weights and biases.
    """

    state_dim = input_dim = noise_dim = 4

    def __init__(self, params: BenchmarkParams = BenchmarkParams()):
        if params.lambda_mu_reading not in ("ones", "diagonal"):
            raise ContractViolation(f"unknown lambda_mu_reading {params.lambda_mu_reading!r}")
        self.params = params
        self.horizon = params.horizon
        stream = RngStream(derive_seed(params.h_seed, "benchmark-h"))
        self.h = MLPPolicy.random([4, params.h_hidden, 4], stream,
                                  weight_std=params.h_weight_std, bias_std=params.h_weight_std)
        self._g = params.input_gain * np.eye(4)

    def nominal_drift(self, t, X):
        X = np.asarray(X, float)
        return -self.params.drift_coeff * X - self.params.input_gain * self.h.evaluate(X)

    def nominal_drift_jacobian(self, t, X):
        """Analytic Jacobian of f; used to cross-check finite differences."""
        X = np.asarray(X, float)
        return -self.params.drift_coeff * np.eye(4) - self.params.input_gain * self.h.state_jacobian(X)

    def input_operator(self, t):
        return self._g

    def drift_uncertainty(self, t, X):
        p = self.params
        X = np.asarray(X, float)
        r = np.linalg.norm(X, axis=-1, keepdims=True)
        mag = p.uncertainty_scale * (p.mu_base + p.mu_slope * r)
        if p.lambda_mu_reading == "ones":
            return mag * np.ones_like(X)
        return mag * X

    def diffusion_uncertainty(self, t, X):
        p = self.params
        X = np.asarray(X, float)
        r = np.linalg.norm(X, axis=-1)
        mag = p.uncertainty_scale * (p.sigma_base + p.sigma_slope * np.sqrt(r))
        return mag[..., None, None] * np.eye(4)


def benchmark_system(h_seed: int = 0, **overrides) -> BenchmarkSystem:
    return BenchmarkSystem(BenchmarkParams(h_seed=h_seed, **overrides))


def _check_dims(sys, x, u):
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    if x.shape[-1] != sys.state_dim or u.shape[-1] != sys.input_dim:
        raise ContractViolation(
            f"expected x in R^{sys.state_dim}, u in R^{sys.input_dim}; got {x.shape}, {u.shape}")
    return x, u


def eval_nominal_drift(sys: SystemBundle, t, x, u):
    """f(t, x) + g(t) u."""
    x, u = _check_dims(sys, x, u)
    return sys.nominal_drift(t, x) + u @ sys.input_operator(t).T


def eval_true_drift(sys: SystemBundle, t, x, u):
    """f(t, x) + g(t) u + Lambda_mu(t, x)."""
    x, u = _check_dims(sys, x, u)
    return eval_nominal_drift(sys, t, x, u) + sys.drift_uncertainty(t, x)


@dataclass(frozen=True)
class GrowthConstants:
    delta_mu: float
    delta_sigma: float
    delta_g: float

    def as_dict(self):
        return {"delta_mu": self.delta_mu, "delta_sigma": self.delta_sigma, "delta_g": self.delta_g}


def probe_states(n: int, radius: float, grid_points: int, seed: int = 0) -> np.ndarray:
    """Radial probe grid: ``grid_points`` radii in [0, radius], each along a
    coordinate axis, the diagonal, or a random direction (cycled)."""
    rng = RngStream(derive_seed(seed, "growth-probe")).generator()
    radii = np.linspace(0.0, radius, grid_points)
    dirs = [np.eye(n)[i] for i in range(n)]
    dirs.append(np.ones(n) / np.sqrt(n))
    dirs += list(rng.standard_normal((8, n)))
    dirs = np.array([d / np.linalg.norm(d) for d in dirs])
    return (radii[:, None, None] * dirs[None, :, :]).reshape(-1, n)


def fit_growth_constants(sys: SystemBundle, radius: float, grid_points: int = 1000,
                         horizon: float | None = None, time_points: int = 11,
                         margin: float = 1.05, seed: int = 0) -> GrowthConstants:
    """Smallest constants satisfying the growth bounds on the probe domain, times ``margin``.

    |Lambda_mu|^2 <= D_mu^2 (1 + |x|^2), |Lambda_sigma|_F^2 <= D_sigma^2 (1 + |x|^2)^(1/2),
    |g(t)|_F <= D_g, over |x| <= radius and t in [0, horizon].
    """
    if radius <= 0 or grid_points < 1000:
        raise ContractViolation("need radius > 0 and grid_points >= 1000")
    horizon = sys.horizon if horizon is None else horizon
    X = probe_states(sys.state_dim, radius, grid_points, seed)
    r2 = np.sum(X * X, axis=1)
    mu2 = sig2 = g_max = 0.0
    for t in np.linspace(0.0, horizon, time_points):
        lam_mu = sys.drift_uncertainty(t, X)
        lam_sig = sys.diffusion_uncertainty(t, X)
        g = sys.input_operator(t)
        if not (np.all(np.isfinite(lam_mu)) and np.all(np.isfinite(lam_sig)) and np.all(np.isfinite(g))):
            raise NonFiniteField(f"non-finite field value at t={t}")
        mu2 = max(mu2, float(np.max(np.sum(lam_mu ** 2, axis=1) / (1.0 + r2))))
        sig2 = max(sig2, float(np.max(np.sum(lam_sig ** 2, axis=(1, 2)) / np.sqrt(1.0 + r2))))
        g_max = max(g_max, float(np.linalg.norm(g, "fro")))
    return GrowthConstants(margin * np.sqrt(mu2), margin * np.sqrt(sig2), margin * g_max)
