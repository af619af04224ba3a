"""Feedback policies with analytic state Jacobians and parameter gradients.

All policies evaluate on a batch ``X`` of shape (B, n) and return (B, m);
a single state of shape (n,) is also accepted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import ContractViolation, RngStream, derive_seed


def _batch(X):
    X = np.asarray(X, dtype=float)
    return (X[None, :], True) if X.ndim == 1 else (X, False)


class _PolicyBase:
    n_in: int
    n_out: int

    def evaluate(self, X):
        raise NotImplementedError

    def state_jacobian(self, X):
        raise NotImplementedError

    def __call__(self, X):
        return self.evaluate(X)


class MLPPolicy(_PolicyBase):
    """Fully connected tanh network with a linear output layer.

    ``linear_skip`` adds a trainable matrix ``S`` so that
    ``u = net(x) + S x``; this lets the class represent a linear gain plus a
    tanh network exactly.

    Parameters are stored as one flat vector: for each layer the weight
    matrix (row-major) followed by its bias, then ``S`` if present.
    """

    def __init__(self, widths, params=None, linear_skip: bool = False, meta: dict | None = None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ContractViolation(f"invalid widths {widths}")
        self.widths = widths
        self.linear_skip = bool(linear_skip)
        self.n_in = widths[0]
        self.n_out = widths[-1]
        self._shapes = []
        for a, b in zip(widths[:-1], widths[1:]):
            self._shapes.append((b, a))
            self._shapes.append((b,))
        if self.linear_skip:
            self._shapes.append((self.n_out, self.n_in))
        self.n_params = int(sum(np.prod(s) for s in self._shapes))
        if params is None:
            params = np.zeros(self.n_params)
        params = np.array(params, dtype=float).ravel()
        if params.size != self.n_params:
            raise ContractViolation(f"expected {self.n_params} parameters, got {params.size}")
        self.params = params
        self.meta = dict(meta or {})

    # construction helpers

    @classmethod
    def random(cls, widths, stream: RngStream, weight_std=None, bias_std: float = 0.0,
               linear_skip: bool = False):
        """Random init. ``weight_std=None`` means N(0, 1/fan_in) weights."""
        rng = stream.generator()
        net = cls(widths, linear_skip=linear_skip, meta={"init_stream": stream.as_dict()})
        chunks = []
        for a, b in zip(net.widths[:-1], net.widths[1:]):
            std = np.sqrt(1.0 / a) if weight_std is None else weight_std
            chunks.append(rng.normal(0.0, std, size=(b, a)).ravel())
            chunks.append(rng.normal(0.0, bias_std, size=b) if bias_std > 0 else np.zeros(b))
        if linear_skip:
            chunks.append(np.zeros(net.n_out * net.n_in))
        net.params = np.concatenate(chunks)
        return net

    @classmethod
    def from_layers(cls, layers, skip=None, meta=None):
        widths = [layers[0][0].shape[1]] + [W.shape[0] for W, _ in layers]
        chunks = []
        for W, b in layers:
            chunks += [np.asarray(W, float).ravel(), np.asarray(b, float).ravel()]
        if skip is not None:
            chunks.append(np.asarray(skip, float).ravel())
        return cls(widths, np.concatenate(chunks), linear_skip=skip is not None, meta=meta)

    def with_params(self, params):
        return MLPPolicy(self.widths, params, self.linear_skip, self.meta)

    def unpack(self, params=None):
        """Return ``(layers, S)`` views into the flat parameter vector."""
        p = self.params if params is None else params
        out, i = [], 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            out.append(p[i:i + size].reshape(shape))
            i += size
        layers = [(out[j], out[j + 1]) for j in range(0, 2 * (len(self.widths) - 1), 2)]
        S = out[-1] if self.linear_skip else None
        return layers, S

    # evaluation

    def evaluate(self, X):
        Xb, single = _batch(X)
        layers, S = self.unpack()
        a = Xb
        for W, b in layers[:-1]:
            a = np.tanh(a @ W.T + b)
        W, b = layers[-1]
        U = a @ W.T + b
        if S is not None:
            U = U + Xb @ S.T
        return U[0] if single else U

    def state_jacobian(self, X):
        Xb, single = _batch(X)
        _, J, _ = self.forward(Xb)
        return J[0] if single else J

    def forward(self, X, params=None):
        """Value, state Jacobian and a cache for :meth:`backward`."""
        X = np.asarray(X, dtype=float)
        layers, S = self.unpack(params)
        a, T = X, None
        cache = []
        for W, b in layers[:-1]:
            z = a @ W.T + b
            Zt = np.broadcast_to(W, (X.shape[0],) + W.shape) if T is None else W @ T
            a_new = np.tanh(z)
            s = 1.0 - a_new * a_new
            T_new = s[:, :, None] * Zt
            cache.append((a, T, a_new, s, Zt))
            a, T = a_new, T_new
        W, b = layers[-1]
        U = a @ W.T + b
        J = np.broadcast_to(W, (X.shape[0],) + W.shape).copy() if T is None else W @ T
        if S is not None:
            U = U + X @ S.T
            J = J + S
        return U, J, (X, a, T, cache, layers, S)

    def backward(self, fcache, U_bar, J_bar=None):
        """Gradient of a scalar loss w.r.t. the flat parameters.

        ``U_bar`` (B, m) and ``J_bar`` (B, m, n) are the loss cotangents of the
        output and of the state Jacobian returned by :meth:`forward`.
        """
        X, a_last, T_last, cache, layers, S = fcache
        B = X.shape[0]
        n = self.n_in
        if J_bar is None:
            J_bar = np.zeros((B, self.n_out, n))
        grads = []
        W, b = layers[-1]
        if T_last is None:
            gW = U_bar.T @ a_last + J_bar.sum(axis=0)
        else:
            gW = U_bar.T @ a_last + np.tensordot(J_bar, T_last, axes=([0, 2], [0, 2]))
        grads.append((gW, U_bar.sum(axis=0)))
        a_bar = U_bar @ W
        T_bar = W.T @ J_bar
        for W, _ in reversed(layers[:-1]):
            a_prev, T_prev, a, s, Zt = cache.pop()
            s_bar = np.sum(T_bar * Zt, axis=2)
            Zt_bar = s[:, :, None] * T_bar
            z_bar = a_bar * s - 2.0 * a * s * s_bar
            if T_prev is None:
                gW = z_bar.T @ a_prev + Zt_bar.sum(axis=0)
            else:
                gW = z_bar.T @ a_prev + np.tensordot(Zt_bar, T_prev, axes=([0, 2], [0, 2]))
                T_bar = W.T @ Zt_bar
            grads.append((gW, z_bar.sum(axis=0)))
            a_bar = z_bar @ W
        grads.reverse()
        chunks = []
        for gW, gb in grads:
            chunks += [gW.ravel(), gb.ravel()]
        if S is not None:
            chunks.append((U_bar.T @ X + J_bar.sum(axis=0)).ravel())
        return np.concatenate(chunks)

    def architecture(self) -> dict:
        return {"type": "mlp", "widths": self.widths, "activation": "tanh",
                "linear_skip": self.linear_skip}


class ExpertPolicy(_PolicyBase):
    """Linear gain plus or minus the system's frozen network ``h``.

    ``cancel_h``: pi*(x) = -K x + h(x), which removes the -g h(x) term of the
    benchmark drift. ``subtract_h``: pi*(x) = -K x - h(x).
    """

    CONVENTIONS = ("cancel_h", "subtract_h")

    def __init__(self, K, h: MLPPolicy, sign_convention: str = "cancel_h"):
        if sign_convention not in self.CONVENTIONS:
            raise ContractViolation(f"unknown sign convention {sign_convention!r}")
        self.K = np.atleast_2d(np.asarray(K, dtype=float))
        self.h = h
        self.sign_convention = sign_convention
        self.sign = 1.0 if sign_convention == "cancel_h" else -1.0
        self.n_out, self.n_in = self.K.shape

    def evaluate(self, X):
        Xb, single = _batch(X)
        U = -Xb @ self.K.T + self.sign * self.h.evaluate(Xb)
        return U[0] if single else U

    def state_jacobian(self, X):
        Xb, single = _batch(X)
        J = -self.K + self.sign * self.h.state_jacobian(Xb)
        return J[0] if single else J


def expert_policy(h: MLPPolicy, k_gain: float, sign_convention: str = "cancel_h") -> ExpertPolicy:
    """Expert with K = k_gain * I_m acting on the benchmark network ``h``."""
    return ExpertPolicy(k_gain * np.eye(h.n_out, h.n_in), h, sign_convention)


def mlp_matching_expert(expert: ExpertPolicy) -> MLPPolicy:
    """An ``MLPPolicy`` (with linear skip) whose parameters reproduce ``expert`` exactly."""
    layers, _ = expert.h.unpack()
    layers = [(W.copy(), b.copy()) for W, b in layers]
    W, b = layers[-1]
    layers[-1] = (expert.sign * W, expert.sign * b)
    return MLPPolicy.from_layers(layers, skip=-expert.K, meta={"source": "expert"})


class ShiftedPolicy(_PolicyBase):
    """``base(x) + offset + gain @ x``; used for controlled perturbations."""

    def __init__(self, base, offset=None, gain=None):
        self.base = base
        self.n_in, self.n_out = base.n_in, base.n_out
        self.offset = np.zeros(self.n_out) if offset is None else np.asarray(offset, float)
        self.gain = np.zeros((self.n_out, self.n_in)) if gain is None else np.asarray(gain, float)

    def evaluate(self, X):
        Xb, single = _batch(X)
        U = self.base.evaluate(Xb) + self.offset + Xb @ self.gain.T
        return U[0] if single else U

    def state_jacobian(self, X):
        Xb, single = _batch(X)
        J = self.base.state_jacobian(Xb) + self.gain
        return J[0] if single else J


@dataclass
class PerturbationSignal:
    """Piecewise-constant input on the partition intervals; ``values[i]`` holds on [t_i, t_{i+1})."""

    values: np.ndarray
    jacobian_mismatch: np.ndarray | None = field(default=None, repr=False)

    def max_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.values, axis=-1))) if len(self.values) else 0.0


def _interval_states(traj):
    states = np.asarray(traj.states)
    k = traj.partition.k
    if states.shape[0] != k + 1:
        raise ContractViolation("trajectory does not match its partition")
    return states[:k]


def perturbation_theta(pi_hat, expert, traj) -> PerturbationSignal:
    """pi_hat - pi* along a rollout of ``pi_hat``, at every knot except T."""
    X = _interval_states(traj)
    return PerturbationSignal(pi_hat.evaluate(X) - expert.evaluate(X))


def perturbation_psi(pi_hat, expert, traj) -> PerturbationSignal:
    """pi_hat - pi* and its state-Jacobian mismatch along an expert rollout."""
    X = _interval_states(traj)
    return PerturbationSignal(
        pi_hat.evaluate(X) - expert.evaluate(X),
        pi_hat.state_jacobian(X) - expert.state_jacobian(X),
    )


def estimate_lipschitz(pi, radius: float, samples: int, seed: int = 0, margin: float = 1.05):
    """Sampled estimates of (L_pi, L_dpi) on the ball of the given radius.

    L_pi is the largest sampled spectral norm of the state Jacobian. L_dpi is
    the largest sampled value of 2 |pi(z) - pi(z0) - J(z0)(z - z0)| / |z - z0|^2.
    """
    if samples < 1000:
        raise ContractViolation("samples must be >= 1000")
    rng = RngStream(derive_seed(seed, "lipschitz")).generator()
    n = pi.n_in

    def ball(count):
        d = rng.standard_normal((count, n))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d * radius * rng.uniform(0.0, 1.0, (count, 1)) ** (1.0 / n)

    def op_norm(Z):
        return np.linalg.norm(pi.state_jacobian(Z), ord=2, axis=(1, 2))

    def quotient(Z, D, h):
        J = pi.state_jacobian(Z)
        rem = pi.evaluate(Z + h[:, None] * D) - pi.evaluate(Z) - np.einsum("bmn,bn->bm", J, h[:, None] * D)
        return 2.0 * np.linalg.norm(rem, axis=1) / h ** 2

    def unit(V):
        return V / np.linalg.norm(V, axis=1, keepdims=True)

    def clip(Z):
        r = np.linalg.norm(Z, axis=1, keepdims=True)
        return np.where(r > radius, Z * radius / np.maximum(r, 1e-300), Z)

    Z0 = ball(samples)
    v = op_norm(Z0)
    D = unit(rng.standard_normal((samples, n)))
    h = np.exp(rng.uniform(np.log(1e-3 * radius), np.log(radius), samples))
    q = quotient(Z0, D, h)
    # local random search around the best samples sharpens both maxima
    top = min(32, samples)
    Zv = Z0[np.argsort(v)[-top:]]
    iq = np.argsort(q)[-top:]
    Zq, Dq, hq = Z0[iq], D[iq], h[iq]
    vbest, qbest = op_norm(Zv), quotient(Zq, Dq, hq)
    scale = 0.1 * radius
    for _ in range(60):
        Zc = clip(Zv + scale * rng.standard_normal(Zv.shape))
        vc = op_norm(Zc)
        better = vc > vbest
        Zv[better], vbest[better] = Zc[better], vc[better]
        Zc = clip(Zq + scale * rng.standard_normal(Zq.shape))
        Dc = unit(Dq + 0.3 * rng.standard_normal(Dq.shape))
        hc = np.clip(hq * np.exp(0.3 * rng.standard_normal(top)), 1e-4 * radius, radius)
        qc = quotient(Zc, Dc, hc)
        better = qc > qbest
        Zq[better], Dq[better], hq[better], qbest[better] = Zc[better], Dc[better], hc[better], qc[better]
        scale *= 0.93
    L_pi = float(max(v.max(), vbest.max()))
    L_dpi = float(max(q.max(), qbest.max()))
    return margin * L_pi, margin * L_dpi


def save_checkpoint(policy: MLPPolicy, path, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``<path>.json`` (architecture, metadata) and ``<path>.bin`` (float64 LE)."""
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".bin") else path
    jpath, bpath = stem.with_suffix(".json"), stem.with_suffix(".bin")
    jpath.parent.mkdir(parents=True, exist_ok=True)
    bpath.write_bytes(np.asarray(policy.params, dtype="<f8").tobytes())
    doc = {"architecture": policy.architecture(), "n_params": policy.n_params,
           "params_file": bpath.name, "meta": policy.meta}
    if extra:
        doc.update(extra)
    jpath.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return jpath, bpath


def load_checkpoint(path) -> MLPPolicy:
    path = Path(path)
    jpath = path if path.suffix == ".json" else path.with_suffix(".json")
    doc = json.loads(jpath.read_text())
    arch = doc["architecture"]
    params = np.frombuffer((jpath.parent / doc["params_file"]).read_bytes(), dtype="<f8").astype(float)
    return MLPPolicy(arch["widths"], params, arch.get("linear_skip", False), doc.get("meta"))
