"""Time partitions, RK4 / Euler-Maruyama integration and ensemble rollouts.

The integrators work on a batch of trajectories at once (state arrays of shape
(B, n)). Ensembles are split into fixed-size chunks, so results do not depend
on how many workers process the chunks.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import ContractViolation, RngStream, derive_seed, gaussian_draw

DIVERGENCE_NORM = 1e9
CHUNK_SIZE = 25


@dataclass(frozen=True)
class Partition:
    """Uniform partition {0, t_1, ..., t_k = T} with RK4/EM substeps per interval."""

    horizon: float
    k: int
    substeps: int = 1

    def __post_init__(self):
        if not (self.horizon > 0 and self.k >= 1 and self.substeps >= 1):
            raise ContractViolation(f"invalid partition {self}")

    @property
    def dT(self) -> float:
        return self.horizon / self.k

    @property
    def dt(self) -> float:
        return self.horizon / (self.k * self.substeps)

    @property
    def steps(self) -> int:
        return self.k * self.substeps

    @property
    def knots(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.k + 1)

    def knot_index(self, t: float) -> int:
        i = int(round(t / self.dT))
        if i < 0 or i > self.k or abs(t - self.knots[i]) > 1e-9 * max(1.0, self.horizon):
            raise ContractViolation(f"t={t} is not a knot of the partition")
        return i

    def as_dict(self):
        return {"horizon": self.horizon, "k": self.k, "substeps": self.substeps}


@dataclass
class Trajectory:
    partition: Partition
    states: np.ndarray
    inputs: np.ndarray
    seed_provenance: dict | str = "deterministic"
    diverged: bool = False
    diverged_time: float | None = None
    substates: np.ndarray | None = field(default=None, repr=False)

    @property
    def times(self):
        return self.partition.knots

    def to_csv(self, path) -> Path:
        return write_trajectory_csv(path, self.times, self.states, self.inputs)


def write_trajectory_csv(path, times, states, inputs) -> Path:
    path = Path(path)
    n, m = states.shape[1], inputs.shape[1]
    header = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)]
    rows = np.column_stack([times, states, inputs])
    with path.open("w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    return path


def read_trajectory_csv(path):
    """Return (times, states, inputs) from a CSV written by :func:`write_trajectory_csv`."""
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n = sum(1 for h in header if h.startswith("x"))
    return data[:, 0], data[:, 1:1 + n], data[:, 1 + n:]


@dataclass(frozen=True)
class InitialLaw:
    """Initial-state distribution: point_mass, uniform_box, gaussian or empirical."""

    kind: str = "uniform_box"
    dim: int = 4
    center: tuple = ()
    half_width: float = 1.0
    std: float = 1.0
    points: tuple = ()

    def __post_init__(self):
        if self.kind not in ("point_mass", "uniform_box", "gaussian", "empirical"):
            raise ContractViolation(f"unknown initial law {self.kind!r}")
        if self.kind == "empirical" and not self.points:
            raise ContractViolation("empirical law needs points")

    def _center(self):
        return np.zeros(self.dim) if not self.center else np.asarray(self.center, float)

    @property
    def compact(self) -> bool:
        return self.kind != "gaussian"

    def sample(self, count: int, stream: RngStream) -> np.ndarray:
        rng = stream.generator()
        c = self._center()
        if self.kind == "point_mass":
            return np.tile(c, (count, 1))
        if self.kind == "uniform_box":
            return c + rng.uniform(-self.half_width, self.half_width, (count, self.dim))
        if self.kind == "gaussian":
            return c + self.std * rng.standard_normal((count, self.dim))
        pts = np.asarray(self.points, float)
        return pts[rng.integers(0, len(pts), count)]

    def mean_cov(self):
        c = self._center()
        if self.kind == "point_mass":
            return c, np.zeros((self.dim, self.dim))
        if self.kind == "uniform_box":
            return c, (self.half_width ** 2 / 3.0) * np.eye(self.dim)
        if self.kind == "gaussian":
            return c, self.std ** 2 * np.eye(self.dim)
        pts = np.asarray(self.points, float)
        return pts.mean(axis=0), np.cov(pts.T, bias=True)

    def as_dict(self):
        return {"kind": self.kind, "dim": self.dim, "center": list(self.center),
                "half_width": self.half_width, "std": self.std,
                "points": [list(p) for p in self.points]}


def _policy_fn(policy):
    return policy.evaluate if hasattr(policy, "evaluate") else policy


def _extra_values(extra, B, k, m):
    if extra is None:
        return None
    vals = getattr(extra, "values", extra)
    vals = np.asarray(vals, float)
    if vals.ndim == 2:
        vals = np.broadcast_to(vals, (B,) + vals.shape)
    if vals.shape != (B, k, m):
        raise ContractViolation(f"extra input must have shape ({k}, {m}) per trajectory")
    return vals


def _rk4_step(sys, pol, X, t, dt, w):
    g = sys.input_operator

    def F(s, Y):
        U = pol(Y) if w is None else pol(Y) + w
        return sys.nominal_drift(s, Y) + U @ g(s).T

    k1 = F(t, X)
    k2 = F(t + 0.5 * dt, X + 0.5 * dt * k1)
    k3 = F(t + 0.5 * dt, X + 0.5 * dt * k2)
    k4 = F(t + dt, X + dt * k3)
    return X + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _finite_rows(X):
    return np.all(np.isfinite(X), axis=1) & (np.linalg.norm(np.nan_to_num(X, nan=np.inf), axis=1) <= DIVERGENCE_NORM)


def rk4_batch(sys, policy, X0, partition: Partition, extra=None, record_substeps=False):
    """Integrate x' = f(t,x) + g(t)(policy(x) + extra(t)) for a batch of initial states.

    Returns (states (B,k+1,n), inputs (B,k+1,m), diverged_time (B,), substates or None).
    Diverged rows are frozen and their later knots left as NaN.
    """
    pol = _policy_fn(policy)
    X = np.array(X0, dtype=float, ndmin=2)
    B, n = X.shape
    m = sys.input_dim
    k, S, dt = partition.k, partition.substeps, partition.dt
    W = _extra_values(extra, B, k, m)
    states = np.full((B, k + 1, n), np.nan)
    inputs = np.full((B, k + 1, m), np.nan)
    sub = np.full((B, k * S + 1, n), np.nan) if record_substeps else None
    alive = np.ones(B, dtype=bool)
    div_time = np.full(B, np.nan)
    for i in range(k):
        w = None if W is None else W[:, i]
        states[alive, i] = X[alive]
        U = pol(X) if w is None else pol(X) + w
        inputs[alive, i] = U[alive]
        for s in range(S):
            j = i * S + s
            if sub is not None:
                sub[alive, j] = X[alive]
            Xn = _rk4_step(sys, pol, X, j * dt, dt, w)
            ok = _finite_rows(Xn)
            newly = alive & ~ok
            div_time[newly] = (j + 1) * dt
            alive &= ok
            X = np.where(alive[:, None], Xn, X)
    states[alive, k] = X[alive]
    inputs[alive, k] = pol(X)[alive]
    if sub is not None:
        sub[alive, k * S] = X[alive]
    return states, inputs, div_time, sub


def integrate_ode(sys, policy, x0, partition: Partition, extra_input=None,
                  record_substeps: bool = False) -> Trajectory:
    """Classic RK4 rollout of the nominal closed loop, sampled at the knots."""
    x0 = np.asarray(x0, float)
    if x0.shape != (sys.state_dim,):
        raise ContractViolation(f"x0 must have shape ({sys.state_dim},)")
    extra = None
    if extra_input is not None:
        extra = np.asarray(getattr(extra_input, "values", extra_input), float)[None]
    states, inputs, dtime, sub = rk4_batch(sys, policy, x0[None], partition, extra, record_substeps)
    div = bool(np.isfinite(dtime[0]))
    return Trajectory(partition, states[0], inputs[0], "deterministic", div,
                      float(dtime[0]) if div else None, None if sub is None else sub[0])


def flow_map(sys, policy, x, t: float, partition: Partition):
    """State one partition interval after knot ``t`` (t must not be T)."""
    i = partition.knot_index(t)
    if i == partition.k:
        raise ContractViolation("flow map is undefined at the final knot")
    pol = _policy_fn(policy)
    X = np.array(x, dtype=float, ndmin=2)
    for s in range(partition.substeps):
        X = _rk4_step(sys, pol, X, (i * partition.substeps + s) * partition.dt, partition.dt, None)
    return X[0] if np.ndim(x) == 1 else X


class PolicyControl:
    """Stateless control: u = policy(x)."""

    def __init__(self, policy):
        self.policy = policy

    def reset(self, X0):
        pass

    def __call__(self, t, X):
        return self.policy.evaluate(X)


def brownian_increments(streams, steps: int, d: int) -> np.ndarray:
    """Standard normal increments (B, steps, d), one RngStream per trajectory."""
    return np.stack([gaussian_draw(s, steps * d).reshape(steps, d) for s in streams])


def em_batch(sys, control, X0, partition: Partition, noise):
    """Euler-Maruyama for dX = F_mu(t, X, u) dt + F_sigma(t, X) dW on a batch.

    ``noise`` holds standard normals of shape (B, steps, d); increments are
    ``sqrt(dt) * noise``. ``control(t, X)`` is called once per substep.
    """
    X = np.array(X0, dtype=float, ndmin=2)
    B, n = X.shape
    m = sys.input_dim
    k, S, dt = partition.k, partition.substeps, partition.dt
    sq = math.sqrt(dt)
    states = np.full((B, k + 1, n), np.nan)
    inputs = np.full((B, k + 1, m), np.nan)
    alive = np.ones(B, dtype=bool)
    div_time = np.full(B, np.nan)
    if hasattr(control, "reset"):
        control.reset(X)
    for j in range(partition.steps):
        t = j * dt
        U = control(t, X)
        if j % S == 0:
            i = j // S
            states[alive, i] = X[alive]
            inputs[alive, i] = U[alive]
        drift = sys.nominal_drift(t, X) + U @ sys.input_operator(t).T + sys.drift_uncertainty(t, X)
        sig = sys.diffusion_uncertainty(t, X)
        Xn = X + drift * dt + np.einsum("bnd,bd->bn", sig, noise[:, j]) * sq
        ok = _finite_rows(Xn)
        newly = alive & ~ok
        div_time[newly] = (j + 1) * dt
        alive &= ok
        X = np.where(alive[:, None], Xn, X)
    U = control(partition.horizon, X)
    states[alive, k] = X[alive]
    inputs[alive, k] = U[alive]
    return states, inputs, div_time


def integrate_sde(sys, control, x0, partition: Partition, stream: RngStream) -> Trajectory:
    """Euler-Maruyama rollout of the uncertain system for one initial state."""
    x0 = np.asarray(x0, float)
    if x0.shape != (sys.state_dim,):
        raise ContractViolation(f"x0 must have shape ({sys.state_dim},)")
    if not hasattr(control, "reset") and hasattr(control, "evaluate"):
        control = PolicyControl(control)
    noise = brownian_increments([stream], partition.steps, sys.noise_dim)
    states, inputs, dtime = em_batch(sys, control, x0[None], partition, noise)
    div = bool(np.isfinite(dtime[0]))
    return Trajectory(partition, states[0], inputs[0], stream.as_dict(), div,
                      float(dtime[0]) if div else None)


@dataclass
class Ensemble:
    trajectories: list
    initial_law: dict
    master_seed: int | None = None

    @property
    def partition(self) -> Partition:
        return self.trajectories[0].partition

    @property
    def states(self) -> np.ndarray:
        return np.stack([tr.states for tr in self.trajectories])

    @property
    def diverged(self) -> np.ndarray:
        return np.array([tr.diverged for tr in self.trajectories])

    def export(self, directory, prefix: str = "traj") -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for i, tr in enumerate(self.trajectories):
            name = f"{prefix}_{i:04d}.csv"
            tr.to_csv(directory / name)
            files.append({"file": name, "seed": tr.seed_provenance, "diverged": tr.diverged,
                          "diverged_time": tr.diverged_time})
        manifest = {"partition": self.partition.as_dict(), "initial_law": self.initial_law,
                    "master_seed": self.master_seed, "count": len(files), "trajectories": files}
        path = directory / f"{prefix}_manifest.json"
        path.write_text(json.dumps(manifest, indent=2))
        return path


class NominalView:
    """The wrapped system with both uncertainties switched off."""

    def __init__(self, sys):
        self.sys = sys
        self.state_dim = sys.state_dim
        self.input_dim = sys.input_dim
        self.noise_dim = sys.noise_dim
        self.horizon = sys.horizon

    def nominal_drift(self, t, X):
        return self.sys.nominal_drift(t, X)

    def input_operator(self, t):
        return self.sys.input_operator(t)

    def drift_uncertainty(self, t, X):
        return np.zeros_like(X)

    def diffusion_uncertainty(self, t, X):
        return np.zeros(X.shape[:-1] + (self.state_dim, self.noise_dim))


def _run_chunk(job):
    kind, sys, control_factory, X0, partition, master_seed, ids = job
    if kind == "ode":
        states, inputs, dtime, _ = rk4_batch(sys, control_factory(), X0, partition)
    elif kind == "euler":
        # nominal system on the Euler-Maruyama grid with no noise
        control = control_factory()
        if not hasattr(control, "reset") and hasattr(control, "evaluate"):
            control = PolicyControl(control)
        noise = np.zeros((len(ids), partition.steps, sys.noise_dim))
        states, inputs, dtime = em_batch(NominalView(sys), control, X0, partition, noise)
    else:
        streams = [RngStream(master_seed, i) for i in ids]
        noise = brownian_increments(streams, partition.steps, sys.noise_dim)
        control = control_factory()
        if not hasattr(control, "reset") and hasattr(control, "evaluate"):
            control = PolicyControl(control)
        states, inputs, dtime = em_batch(sys, control, X0, partition, noise)
    return states, inputs, dtime


def run_chunked(kind, sys, control_factory, X0, partition, master_seed=0, workers: int = 1,
                chunk_size: int = CHUNK_SIZE):
    """Roll out every row of ``X0`` in fixed chunks; trajectory i uses stream i.

    ``kind`` is "sde" (Euler-Maruyama), "ode" (RK4 on the nominal system) or
    "euler" (the Euler-Maruyama scheme on the nominal system, no noise).
    """
    if kind not in ("sde", "ode", "euler"):
        raise ContractViolation(f"unknown rollout kind {kind!r}")
    X0 = np.asarray(X0, float)
    N = X0.shape[0]
    jobs = []
    if chunk_size < 1:
        raise ContractViolation("chunk_size must be >= 1")
    # chunking is fixed by chunk_size alone, never by the worker count
    for start in range(0, N, chunk_size):
        ids = list(range(start, min(N, start + chunk_size)))
        jobs.append((kind, sys, control_factory, X0[ids], partition, master_seed, ids))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_chunk, jobs))
    else:
        results = [_run_chunk(j) for j in jobs]
    states = np.concatenate([r[0] for r in results])
    inputs = np.concatenate([r[1] for r in results])
    dtime = np.concatenate([r[2] for r in results])
    return states, inputs, dtime


def simulate_ensemble(sys, control_factory, partition: Partition, count: int = None,
                      initial_law: InitialLaw | None = None, initial_states=None,
                      master_seed: int = 0, kind: str = "sde", workers: int = 1,
                      chunk_size: int = CHUNK_SIZE) -> Ensemble:
    """Ensemble rollout. Initial states come from ``initial_states`` or are drawn
    from ``initial_law`` with a seed derived from ``master_seed``.

    ``control_factory()`` must return a fresh control (or policy) per chunk and,
    for ``workers > 1``, be picklable.
    """
    if initial_states is None:
        if initial_law is None or count is None or count < 1:
            raise ContractViolation("need count >= 1 and an initial law, or explicit initial states")
        initial_states = initial_law.sample(count, RngStream(derive_seed(master_seed, "initial"), 0))
    X0 = np.array(initial_states, dtype=float, ndmin=2)
    states, inputs, dtime = run_chunked(kind, sys, control_factory, X0, partition, master_seed, workers,
                                       chunk_size)
    trajs = []
    for i in range(X0.shape[0]):
        div = bool(np.isfinite(dtime[i]))
        prov = RngStream(master_seed, i).as_dict() if kind == "sde" else "deterministic"
        trajs.append(Trajectory(partition, states[i], inputs[i], prov, div,
                                float(dtime[i]) if div else None))
    law = initial_law.as_dict() if initial_law is not None else {"kind": "explicit"}
    return Ensemble(trajs, law, master_seed)
