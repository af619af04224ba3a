"""Expert training data and the first-order Taylor-matching imitation trainer.

Per expert trajectory i the loss is

    l_i = 1/2 ( max_t |Psi_{i,t}| + max_t |grad_x Psi_{i,t}| ),
    Psi_{i,t} = pi_hat(x_{i,t}) - pi*(x_{i,t}),

over the knots t_0..t_{k-1} of the expert rollout, and the objective is the
mean of l_i over trajectories. For training, each max may be replaced by the
normalised log-sum-exp  (1/beta) log( (1/k) sum_t exp(beta a_t) ), which lies in
[max - log(k)/beta, max].
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import ContractViolation, RngStream, derive_seed
from .policy import MLPPolicy
from .simulate import InitialLaw, Partition, rk4_batch, write_trajectory_csv

log = logging.getLogger(__name__)


class ExpertUnstable(RuntimeError):
    """An expert rollout diverged on the nominal system."""


class TrainingAborted(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainingSet:
    partition: Partition
    initial_states: np.ndarray
    states: np.ndarray
    expert: object = field(repr=False)
    initial_law: dict = field(default_factory=dict)
    master_seed: int = 0

    @property
    def n(self) -> int:
        return self.states.shape[0]

    def interval_states(self) -> np.ndarray:
        """States at t_0..t_{k-1}, shape (n, k, dim)."""
        return self.states[:, : self.partition.k]

    def export(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        knots = self.partition.knots
        files = []
        for i in range(self.n):
            name = f"expert_{i:04d}.csv"
            write_trajectory_csv(directory / name, knots, self.states[i], self.expert.evaluate(self.states[i]))
            files.append({"file": name, "xi": self.initial_states[i].tolist()})
        manifest = {"partition": self.partition.as_dict(), "initial_law": self.initial_law,
                    "master_seed": self.master_seed, "count": self.n, "trajectories": files}
        path = directory / "expert_manifest.json"
        path.write_text(json.dumps(manifest, indent=2))
        return path


def generate_training_data(sys, expert, initial_law: InitialLaw, n: int, partition: Partition,
                           master_seed: int = 0) -> TrainingSet:
    """n expert rollouts of the nominal system from i.i.d. initial draws."""
    if n < 1:
        raise ContractViolation("n must be >= 1")
    if not initial_law.compact:
        raise ContractViolation("training initial law must have compact support")
    xis = initial_law.sample(n, RngStream(derive_seed(master_seed, "training-initial"), 0))
    states, _, dtime, _ = rk4_batch(sys, expert, xis, partition)
    if np.any(np.isfinite(dtime)):
        bad = int(np.flatnonzero(np.isfinite(dtime))[0])
        raise ExpertUnstable(f"expert rollout {bad} diverged at t={dtime[bad]:.3f}")
    return TrainingSet(partition, xis, states, expert, initial_law.as_dict(), master_seed)


@dataclass
class TasilLossReport:
    value_terms: np.ndarray
    jacobian_terms: np.ndarray
    loss: float
    value_argmax: np.ndarray
    jacobian_argmax: np.ndarray


def _expert_reference(ts: TrainingSet):
    cache = getattr(ts, "_expert_ref", None)
    if cache is None:
        X = ts.interval_states().reshape(-1, ts.states.shape[-1])
        cache = (X, ts.expert.evaluate(X), ts.expert.state_jacobian(X))
        ts._expert_ref = cache
    return cache


def _matrix_norm(G, jac_norm):
    """Row-wise matrix norm and, for the operator norm, the top singular pair."""
    if jac_norm == "frobenius":
        norms = np.sqrt(np.sum(G * G, axis=(-2, -1)))
        return norms, None
    if jac_norm != "operator":
        raise ContractViolation(f"unknown jacobian norm {jac_norm!r}")
    # top singular pair from the Gram matrix; cheaper than a batched SVD at this size
    evals, evecs = np.linalg.eigh(np.swapaxes(G, -1, -2) @ G)
    sigma = np.sqrt(np.maximum(evals[..., -1], 0.0))
    v = evecs[..., :, -1]
    Gv = (G @ v[..., None])[..., 0]
    u = np.divide(Gv, sigma[..., None], out=np.zeros_like(Gv), where=sigma[..., None] > 0)
    return sigma, (u, v)


def _smooth_max(a, smoothing, beta):
    """Row-wise max or normalised log-sum-exp, with its weights over columns."""
    if smoothing == "hard_max":
        idx = np.argmax(a, axis=1)
        w = np.zeros_like(a)
        w[np.arange(a.shape[0]), idx] = 1.0
        return a[np.arange(a.shape[0]), idx], w
    if smoothing != "logsumexp":
        raise ContractViolation(f"unknown smoothing {smoothing!r}")
    top = a.max(axis=1, keepdims=True)
    e = np.exp(beta * (a - top))
    val = top[:, 0] + np.log(e.mean(axis=1)) / beta
    return val, e / e.sum(axis=1, keepdims=True)


def _evaluate(pi_hat: MLPPolicy, ts: TrainingSet, params, jac_norm):
    X, Ue, Je = _expert_reference(ts)
    U, J, fcache = pi_hat.forward(X, params)
    Psi = U - Ue
    G = J - Je
    n_traj, k = ts.n, ts.partition.k
    a = np.linalg.norm(Psi, axis=1)
    b, sv = _matrix_norm(G, jac_norm)
    return Psi, G, a.reshape(n_traj, k), b.reshape(n_traj, k), sv, fcache


def tasil_loss(pi_hat, ts: TrainingSet, smoothing: str = "hard_max", beta: float = 10.0,
               jac_norm: str = "operator") -> TasilLossReport:
    if pi_hat.n_in != ts.states.shape[-1] or pi_hat.n_out != ts.expert.n_out:
        raise ContractViolation("policy dimensions do not match the training set")
    X, Ue, Je = _expert_reference(ts)
    Psi = pi_hat.evaluate(X) - Ue
    G = pi_hat.state_jacobian(X) - Je
    a = np.linalg.norm(Psi, axis=1).reshape(ts.n, -1)
    b = _matrix_norm(G, jac_norm)[0].reshape(ts.n, -1)
    v, _ = _smooth_max(a, smoothing, beta)
    j, _ = _smooth_max(b, smoothing, beta)
    return TasilLossReport(v, j, float(np.mean(0.5 * (v + j))), np.argmax(a, axis=1), np.argmax(b, axis=1))


def loss_gradient(pi_hat: MLPPolicy, ts: TrainingSet, smoothing: str = "logsumexp", beta: float = 10.0,
                  terms: str = "both", jac_norm: str = "operator", params=None, _details=False):
    """Smoothed loss and its exact gradient w.r.t. the flat parameters.

    ``terms="value"`` drops the Jacobian term (behavioural cloning ablation).
    Zero-norm entries get a zero subgradient.
    """
    Psi, G, a, b, sv, fcache = _evaluate(pi_hat, ts, params, jac_norm)
    n_traj = ts.n
    v, wv = _smooth_max(a, smoothing, beta)
    scale = 0.5 / n_traj
    flat_a = a.reshape(-1)
    unit = np.divide(Psi, flat_a[:, None], out=np.zeros_like(Psi), where=flat_a[:, None] > 0)
    U_bar = (scale * wv.reshape(-1))[:, None] * unit
    if terms == "both":
        j, wj = _smooth_max(b, smoothing, beta)
        flat_b = b.reshape(-1)
        if sv is None:
            dG = np.divide(G, flat_b[:, None, None], out=np.zeros_like(G), where=flat_b[:, None, None] > 0)
        else:
            dG = sv[0][:, :, None] * sv[1][:, None, :]
            dG[flat_b <= 0] = 0.0
        J_bar = (scale * wj.reshape(-1))[:, None, None] * dG
        loss = float(np.mean(0.5 * (v + j)))
    elif terms == "value":
        j = np.zeros_like(v)
        J_bar = None
        loss = float(np.mean(0.5 * v))
    else:
        raise ContractViolation(f"unknown terms {terms!r}")
    grad = pi_hat.backward(fcache, U_bar, J_bar)
    if _details:
        hard = (a.max(axis=1), b.max(axis=1))
        return loss, grad, hard
    return loss, grad


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    steps: int = 5000
    beta_start: float = 1.0
    beta_end: float = 50.0
    smoothing: str = "logsumexp"
    terms: str = "both"
    jac_norm: str = "operator"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)
    best_step: int = -1
    best_loss: float = float("inf")
    empirical_risk: float = float("nan")

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w") as fh:
            fh.write("step,loss,value_term,jac_term,grad_norm\n")
            for r in self.rows:
                fh.write(",".join(repr(float(x)) if i else str(int(x)) for i, x in enumerate(r)) + "\n")
        return path

    @property
    def losses(self):
        return np.array([r[1] for r in self.rows])


def _beta(step, cfg: OptimizerConfig):
    if cfg.steps <= 1:
        return cfg.beta_end
    frac = step / (cfg.steps - 1)
    return cfg.beta_start * (cfg.beta_end / cfg.beta_start) ** frac


def train_tasil(ts: TrainingSet, widths=None, linear_skip: bool = True, opt: OptimizerConfig = None,
                init_seed: int = 0, init_policy: MLPPolicy | None = None):
    """Adam on the smoothed loss; returns (best policy by hard-max loss, TrainingLog).

    The logged ``loss`` is the hard-max objective at the parameters before the update.
    """
    opt = opt or OptimizerConfig()
    dim = ts.states.shape[-1]
    if init_policy is None:
        widths = widths or [dim, 16, ts.expert.n_out]
        stream = RngStream(derive_seed(init_seed, "policy-init"))
        init_policy = MLPPolicy.random(widths, stream, linear_skip=linear_skip)
    pi = init_policy
    theta = pi.params.copy()
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    tl = TrainingLog()
    best = theta.copy()
    b1, b2 = opt.adam_beta1, opt.adam_beta2
    for step in range(opt.steps):
        beta = _beta(step, opt)
        _, grad, (va, jb) = loss_gradient(pi, ts, opt.smoothing, beta, opt.terms, opt.jac_norm,
                                          params=theta, _details=True)
        value_term = float(np.mean(va))
        jac_term = float(np.mean(jb))
        hard = 0.5 * (value_term + jac_term) if opt.terms == "both" else 0.5 * value_term
        gnorm = float(np.linalg.norm(grad))
        if not (np.isfinite(hard) and np.isfinite(gnorm)):
            raise TrainingAborted(f"non-finite loss at step {step}: loss={hard}, |grad|={gnorm}")
        tl.rows.append((step, hard, value_term, jac_term, gnorm))
        if hard < tl.best_loss:
            tl.best_loss, tl.best_step, best = hard, step, theta.copy()
        m1 = b1 * m1 + (1 - b1) * grad
        m2 = b2 * m2 + (1 - b2) * grad * grad
        mh = m1 / (1 - b1 ** (step + 1))
        vh = m2 / (1 - b2 ** (step + 1))
        theta = theta - opt.lr * mh / (np.sqrt(vh) + opt.adam_eps)
    final = tasil_loss(pi.with_params(theta), ts, "hard_max", jac_norm=opt.jac_norm)
    final_loss = final.loss if opt.terms == "both" else float(np.mean(0.5 * final.value_terms))
    if final_loss < tl.best_loss:
        tl.best_loss, tl.best_step, best = final_loss, opt.steps, theta.copy()
    trained = pi.with_params(best)
    trained.meta = dict(pi.meta, training={"mode": "tasil" if opt.terms == "both" else "bc",
                                           "best_step": tl.best_step, "best_loss": tl.best_loss,
                                           "optimizer": asdict(opt), "init_seed": init_seed})
    tl.empirical_risk = float(np.mean(tasil_loss(trained, ts, "hard_max", jac_norm=opt.jac_norm).value_terms))
    trained.meta["training"]["empirical_risk"] = tl.empirical_risk
    log.info("training done: best hard-max loss %.3e at step %d", tl.best_loss, tl.best_step)
    return trained, tl
