"""Imitation-gap estimators, contraction certification and incremental-stability checks.

Every gap is built from paired rollouts. For each sample i and knot t the
pathwise distance ``d[i, t] = |A_i(t) - B_i(t)|`` is formed; the gap at t is the
mean of ``d[:, t]`` over non-diverged pairs and the reported scalar is its max
over knots.

Nominal references that are compared with an SDE rollout are integrated on
the same Euler-Maruyama grid with the uncertainties switched off, so that with
zero uncertainty the uncertain and nominal processes coincide path by path.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .l1drac import DripControl, L1Config
from .numerics import ContractViolation, RngStream, derive_seed, log_norm_2
from .simulate import InitialLaw, Partition, rk4_batch, run_chunked


class CertificationFailed(RuntimeError):
    """The sampled closed-loop log norm is not negative."""

    def __init__(self, message, worst_point=None, worst_time=None, worst_value=None):
        super().__init__(message)
        self.worst_point = worst_point
        self.worst_time = worst_time
        self.worst_value = worst_value


# contraction

def fd_jacobian(fun, t, X, step: float = 1e-5) -> np.ndarray:
    """Central differences with one Richardson extrapolation, batched: (B, n, n)."""
    X = np.array(X, dtype=float, ndmin=2)
    B, n = X.shape
    J = np.empty((B, n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0

        def central(h):
            return (fun(t, X + h * e) - fun(t, X - h * e)) / (2.0 * h)

        J[:, :, j] = (4.0 * central(0.5 * step) - central(step)) / 3.0
    return J


def _ball(rng, count, n, radius):
    d = rng.standard_normal((count, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * radius * rng.uniform(0.0, 1.0, (count, 1)) ** (1.0 / n)


def closed_loop_jacobian(sys, policy, t, X, fd_step: float = 1e-5) -> np.ndarray:
    """grad_x [f(t, x) + g(t) pi(x)] with f differentiated numerically."""
    Jf = fd_jacobian(sys.nominal_drift, t, X, fd_step)
    return Jf + sys.input_operator(t) @ policy.state_jacobian(X)


def certify_contraction(sys, policy, probe_radius: float, probes: int = 10_000, seed: int = 0,
                        horizon: float | None = None, fd_step: float = 1e-5) -> float:
    """Certified rate lambda = -max log_norm_2 of the closed-loop Jacobian over sampled (t, x)."""
    if probes < 10_000:
        raise ContractViolation("probes must be >= 10^4")
    if probe_radius <= 0:
        raise ContractViolation("probe_radius must be positive")
    rng = RngStream(derive_seed(seed, "contraction-probe")).generator()
    horizon = sys.horizon if horizon is None else horizon
    X = _ball(rng, probes, sys.state_dim, probe_radius)
    times = rng.uniform(0.0, horizon, probes)
    mus = np.empty(probes)
    # probes are grouped in batches sharing one time value
    for idx in np.array_split(np.arange(probes), 100):
        t = float(times[idx[0]])
        times[idx] = t
        mus[idx] = log_norm_2(closed_loop_jacobian(sys, policy, t, X[idx], fd_step))
    worst = int(np.argmax(mus))
    if not np.isfinite(mus[worst]) or mus[worst] >= 0:
        raise CertificationFailed(
            f"closed-loop log norm {mus[worst]:.6g} >= 0 at t={times[worst]:.4g}, x={X[worst].tolist()}",
            X[worst].copy(), float(times[worst]), float(mus[worst]))
    return float(-mus[worst])


# couplings

@dataclass(frozen=True)
class CouplingSpec:
    """Joint law of (xi, xi_bar).

    ``synchronous``: xi_bar = xi.  ``independent``: xi ~ law, xi_bar ~ law_bar
    drawn from separate streams.  ``shifted``: xi_bar = shift + scale * xi.
    """

    mode: str = "synchronous"
    law: InitialLaw = field(default_factory=InitialLaw)
    law_bar: InitialLaw | None = None
    shift: tuple = ()
    scale: float = 1.0

    def __post_init__(self):
        if self.mode not in ("synchronous", "independent", "shifted"):
            raise ContractViolation(f"unknown coupling mode {self.mode!r}")
        if self.mode == "synchronous" and self.law_bar is not None and self.law_bar != self.law:
            raise ContractViolation("synchronous coupling needs identical marginals")
        if self.mode == "independent" and self.law_bar is None:
            raise ContractViolation("independent coupling needs law_bar")

    @classmethod
    def default(cls, law: InitialLaw, law_bar: InitialLaw | None = None) -> "CouplingSpec":
        if law_bar is None or law_bar == law:
            return cls("synchronous", law)
        return cls("independent", law, law_bar)

    def _shift(self):
        return np.zeros(self.law.dim) if not self.shift else np.asarray(self.shift, float)

    def sample(self, count: int, master_seed: int = 0):
        xi = self.law.sample(count, RngStream(derive_seed(master_seed, "initial"), 0))
        if self.mode == "synchronous":
            return xi, xi.copy()
        if self.mode == "shifted":
            return xi, self._shift() + self.scale * xi
        xi_bar = self.law_bar.sample(count, RngStream(derive_seed(master_seed, "initial-bar"), 0))
        return xi, xi_bar

    def marginal_moments(self):
        """Declared (mean, cov) of xi and of xi_bar."""
        m, C = self.law.mean_cov()
        if self.mode == "synchronous":
            return (m, C), (m, C)
        if self.mode == "shifted":
            return (m, C), (self._shift() + self.scale * m, self.scale ** 2 * C)
        return (m, C), self.law_bar.mean_cov()

    def as_dict(self):
        return {"mode": self.mode, "law": self.law.as_dict(),
                "law_bar": None if self.law_bar is None else self.law_bar.as_dict(),
                "shift": list(self.shift), "scale": self.scale}


# rollout factories (picklable so chunks can run in worker processes)

@dataclass
class ControlSpec:
    """Control built per chunk: the baseline policy, plus L1 when ``l1`` is set."""

    sys: object
    baseline: object
    l1: L1Config | None = None
    dt: float | None = None

    def __call__(self):
        if self.l1 is None:
            return self.baseline
        return DripControl(self.sys, self.baseline, self.l1, self.dt)


def _rollout(kind, sys, baseline, X0, partition, master_seed=0, workers=1, l1=None):
    spec = ControlSpec(sys, baseline, l1, partition.dt)
    states, _, dtime = run_chunked(kind, sys, spec, X0, partition, master_seed, workers)
    return states, np.isfinite(dtime)


# gap reports

P_ORDERS = (1, 2, 3)


@dataclass
class GapReport:
    times: np.ndarray
    distances: np.ndarray
    diverged: np.ndarray
    label: str = ""
    p_orders: tuple = P_ORDERS

    @property
    def n_total(self) -> int:
        return int(self.distances.shape[0])

    @property
    def diverged_count(self) -> int:
        return int(np.sum(self.diverged))

    @property
    def n_used(self) -> int:
        return self.n_total - self.diverged_count

    def _used(self):
        return self.distances[~self.diverged]

    @property
    def gap_mean(self) -> np.ndarray:
        d = self._used()
        return d.mean(axis=0) if len(d) else np.full(len(self.times), np.nan)

    @property
    def gap_se(self) -> np.ndarray:
        d = self._used()
        if len(d) < 2:
            return np.full(len(self.times), np.nan)
        return d.std(axis=0, ddof=1) / math.sqrt(len(d))

    def moment(self, p: int) -> np.ndarray:
        """Per-knot E[d^(2p)]^(1/(2p)) over non-diverged pairs."""
        d = self._used()
        if len(d) == 0:
            return np.full(len(self.times), np.nan)
        return np.mean(d ** (2 * p), axis=0) ** (1.0 / (2 * p))

    @property
    def max_gap(self) -> float:
        g = self.gap_mean
        return float(np.max(g)) if np.all(np.isfinite(g)) else float("nan")

    @property
    def argmax_knot(self) -> int:
        return int(np.argmax(self.gap_mean))

    def path_max(self) -> np.ndarray:
        """Max-over-knots distance of each non-diverged pair."""
        return self._used().max(axis=1)

    def to_csv(self, path) -> Path:
        path = Path(path)
        g, se = self.gap_mean, self.gap_se
        mom = [self.moment(p) for p in self.p_orders]
        head = ["t", "gap_mean", "gap_se"] + [f"p{2 * p}_moment" for p in self.p_orders] + ["diverged_count"]
        with path.open("w") as fh:
            fh.write(",".join(head) + "\n")
            for i, t in enumerate(self.times):
                row = [t, g[i], se[i]] + [m[i] for m in mom]
                fh.write(",".join(repr(float(v)) for v in row) + f",{self.diverged_count}\n")
        return path

    def summary(self) -> dict:
        return {"label": self.label, "max_gap": self.max_gap,
                "argmax_t": float(self.times[self.argmax_knot]) if self.n_used else None,
                "max_moment": {str(p): float(np.max(self.moment(p))) for p in self.p_orders},
                "n_total": self.n_total, "n_used": self.n_used,
                "diverged_count": self.diverged_count, "p_orders": list(self.p_orders)}

    def to_json(self, path, extra: dict | None = None) -> Path:
        path = Path(path)
        path.write_text(json.dumps(dict(self.summary(), **(extra or {})), indent=2))
        return path


def pair_report(A, A_div, B, B_div, partition, label="") -> GapReport:
    """Gap report from two aligned rollout batches and their divergence flags."""
    diverged = A_div | B_div
    d = np.linalg.norm(A - B, axis=2)
    d[diverged] = np.nan
    return GapReport(partition.knots, d, diverged, label)


def policy_gap(pi_hat, expert, sys, initial_samples, partition: Partition, scheme: str = "rk4",
               workers: int = 1) -> GapReport:
    """Paired nominal rollouts of pi_hat and pi* from identical initial states."""
    kind = {"rk4": "ode", "em": "euler"}.get(scheme)
    if kind is None:
        raise ContractViolation(f"unknown scheme {scheme!r}")
    X0 = np.array(initial_samples, dtype=float, ndmin=2)
    A, a_div = _rollout(kind, sys, pi_hat, X0, partition, workers=workers)
    B, b_div = _rollout(kind, sys, expert, X0, partition, workers=workers)
    return pair_report(A, a_div, B, b_div, partition, "policy")


def _uncertain(sys, pi_tasil, l1, xi_bar, partition, master_seed, workers):
    return _rollout("sde", sys, pi_tasil, xi_bar, partition, master_seed, workers, l1)


def uncertainty_gap(pi_tasil, l1: L1Config | None, sys, coupling: CouplingSpec, ensemble_size: int,
                    partition: Partition, master_seed: int = 0, workers: int = 1) -> GapReport:
    """SDE rollout of pi_tasil (+ L1) from xi_bar against the nominal pi_tasil rollout from xi."""
    if ensemble_size < 30:
        raise ContractViolation("ensemble_size must be >= 30")
    xi, xi_bar = coupling.sample(ensemble_size, master_seed)
    A, a_div = _uncertain(sys, pi_tasil, l1, xi_bar, partition, master_seed, workers)
    B, b_div = _rollout("euler", sys, pi_tasil, xi, partition, workers=workers)
    return pair_report(A, a_div, B, b_div, partition, "uncertainty")


def total_gap(pi_tasil, l1: L1Config | None, expert, sys, coupling: CouplingSpec, ensemble_size: int,
              partition: Partition, master_seed: int = 0, workers: int = 1) -> GapReport:
    """SDE rollout of pi_tasil (+ L1) from xi_bar against the nominal expert rollout from xi."""
    if ensemble_size < 30:
        raise ContractViolation("ensemble_size must be >= 30")
    xi, xi_bar = coupling.sample(ensemble_size, master_seed)
    A, a_div = _uncertain(sys, pi_tasil, l1, xi_bar, partition, master_seed, workers)
    B, b_div = _rollout("euler", sys, expert, xi, partition, workers=workers)
    return pair_report(A, a_div, B, b_div, partition, "total")


@dataclass
class Decomposition:
    total: GapReport
    policy: GapReport
    uncertainty: GapReport

    def pathwise_violation(self) -> float:
        """max over pairs and knots of d_total - d_policy - d_uncertainty (<= 0 when it holds)."""
        ok = ~(self.total.diverged | self.policy.diverged | self.uncertainty.diverged)
        v = (self.total.distances[ok] - self.policy.distances[ok] - self.uncertainty.distances[ok])
        return float(np.max(v)) if v.size else float("-inf")

    def mean_violation(self) -> float:
        """max over knots of TIG - (policy-IG + uncertainty-IG) on the shared pairs."""
        ok = ~(self.total.diverged | self.policy.diverged | self.uncertainty.diverged)
        d = (self.total.distances[ok].mean(axis=0) - self.policy.distances[ok].mean(axis=0)
             - self.uncertainty.distances[ok].mean(axis=0))
        return float(np.max(d)) if ok.any() else float("-inf")


def gap_decomposition(pi_tasil, l1: L1Config | None, expert, sys, coupling: CouplingSpec,
                      ensemble_size: int, partition: Partition, master_seed: int = 0,
                      workers: int = 1) -> Decomposition:
    """TIG, policy-IG and uncertainty-IG on one shared set of (xi, xi_bar, Brownian) samples."""
    if ensemble_size < 30:
        raise ContractViolation("ensemble_size must be >= 30")
    xi, xi_bar = coupling.sample(ensemble_size, master_seed)
    X, x_div = _uncertain(sys, pi_tasil, l1, xi_bar, partition, master_seed, workers)
    xt, t_div = _rollout("euler", sys, pi_tasil, xi, partition, workers=workers)
    xe, e_div = _rollout("euler", sys, expert, xi, partition, workers=workers)
    return Decomposition(pair_report(X, x_div, xe, e_div, partition, "total"),
                         pair_report(xt, t_div, xe, e_div, partition, "policy"),
                         pair_report(X, x_div, xt, t_div, partition, "uncertainty"))


# incremental stability

@dataclass(frozen=True)
class DeltaIssParams:
    lam: float
    theta: float
    delta_g: float

    def __post_init__(self):
        if self.lam <= 0 or self.delta_g <= 0:
            raise ContractViolation("lambda and delta_g must be positive")
        if not (0.0 < self.theta < 2.0 * self.lam / self.delta_g ** 2):
            raise ContractViolation(f"theta={self.theta} outside (0, 2 lambda / delta_g^2)")

    @property
    def lambda_theta(self) -> float:
        return 2.0 * self.lam - self.theta * self.delta_g ** 2

    @property
    def gain(self) -> float:
        """1 / sqrt(theta lambda_theta), the steady-state input-to-state gain."""
        return 1.0 / math.sqrt(self.theta * self.lambda_theta)


def theta_grid(lam: float, delta_g: float, count: int = 20) -> np.ndarray:
    """Log-spaced admissible theta values in (0.01, 0.99) * 2 lambda / delta_g^2."""
    top = 2.0 * lam / delta_g ** 2
    return np.geomspace(0.01 * top, 0.99 * top, count)


def iss_bound(params: DeltaIssParams, times, initial_distance: float, sup_input) -> np.ndarray:
    """e^{-l t/2} |xi1 - xi2| + gain (1 - e^{-l t})^{1/2} sup|s| with l = lambda_theta."""
    lt = params.lambda_theta
    t = np.asarray(times, float)
    return (np.exp(-0.5 * lt * t) * initial_distance
            + params.gain * np.sqrt(1.0 - np.exp(-lt * t)) * np.asarray(sup_input, float))


@dataclass
class IssCheck:
    times: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray

    @property
    def margin(self) -> np.ndarray:
        return self.rhs - self.lhs

    def violations(self, tol: float = 1e-6) -> int:
        return int(np.sum(self.margin < -tol))


def delta_iss_check(sys, expert, perturbation, xi1, xi2, params: DeltaIssParams,
                    partition: Partition) -> IssCheck:
    """Perturbed rollout from xi1 against the unperturbed one from xi2, with the bound per knot.

    The bound at knot t_i uses the sup of the perturbation over the intervals before t_i.
    """
    values = np.asarray(getattr(perturbation, "values", perturbation), float)
    if values.shape != (partition.k, sys.input_dim):
        raise ContractViolation(f"perturbation must have shape ({partition.k}, {sys.input_dim})")
    X0 = np.array([xi1, xi2], dtype=float)
    extra = np.stack([values, np.zeros_like(values)])
    states, _, _, _ = rk4_batch(sys, expert, X0, partition, extra)
    lhs = np.linalg.norm(states[0] - states[1], axis=1)
    norms = np.linalg.norm(values, axis=1)
    running = np.concatenate([[0.0], np.maximum.accumulate(norms)])
    rhs = iss_bound(params, partition.knots, float(np.linalg.norm(X0[0] - X0[1])), running)
    return IssCheck(partition.knots, lhs, rhs)


# moments and tails

def moment_bound(ensemble, p: int) -> float:
    """max over knots of E[|x_t|^(2p)]^(1/(2p)), over the non-diverged trajectories."""
    if int(p) != p or p < 1:
        raise ContractViolation("p must be an integer >= 1")
    states = ensemble.states if hasattr(ensemble, "states") else np.asarray(ensemble, float)
    if states.ndim == 2:
        states = states[None]
    if states.shape[0] == 0:
        raise ContractViolation("ensemble is empty")
    ok = np.all(np.isfinite(states), axis=(1, 2))
    r = np.linalg.norm(states[ok], axis=2)
    return float(np.max(np.mean(r ** (2 * p), axis=0) ** (1.0 / (2 * p))))


def tail_order(delta: float) -> int:
    """p = ceil(log sqrt(1/delta)), at least 1."""
    if not 0.0 < delta < 1.0:
        raise ContractViolation("delta must lie in (0, 1)")
    return max(1, math.ceil(math.log(math.sqrt(1.0 / delta))))


@dataclass
class TailCheck:
    delta: float
    p: int
    threshold: float
    fraction: float
    binomial_se: float
    n: int

    @property
    def passed(self) -> bool:
        return self.fraction <= self.delta + 3.0 * self.binomial_se


def tail_check(report: GapReport, delta: float) -> TailCheck:
    """Fraction of pairs whose max-knot distance exceeds e times the empirical 2p-moment gap."""
    p = tail_order(delta)
    threshold = math.e * float(np.max(report.moment(p)))
    pm = report.path_max()
    n = len(pm)
    frac = float(np.mean(pm > threshold)) if n else float("nan")
    return TailCheck(delta, p, threshold, frac, math.sqrt(delta * (1.0 - delta) / max(n, 1)), n)
