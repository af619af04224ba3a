"""Pipeline stages behind the command line: certify, train, evaluate, figure5, sweep.

Stages hand artifacts to each other through files under one output root:

    <out>/certify/certification.json
    <out>/train/tasil_policy.{json,bin}, expert_policy.{json,bin}, training_log.csv
    <out>/evaluate/*.csv, *.json
    <out>/figure5/figure5.csv, figure5.svg, ensembles
    <out>/sweep/sweep.csv

Each stage writes a ``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, to_json
from .dynamics import benchmark_system, fit_growth_constants
from .l1drac import L1Config
from .metrics import (CertificationFailed, ControlSpec, CouplingSpec, DeltaIssParams, certify_contraction,
                      closed_loop_jacobian, delta_iss_check, gap_decomposition, pair_report, tail_check,
                      theta_grid, total_gap)
from .numerics import RngStream, column_rank_ok, derive_seed
from .policy import (PerturbationSignal, estimate_lipschitz, expert_policy, load_checkpoint, mlp_matching_expert,
                     save_checkpoint)
from .simulate import Ensemble, InitialLaw, Partition, Trajectory, run_chunked
from .tasil import OptimizerConfig, generate_training_data, train_tasil

log = logging.getLogger(__name__)


class ArtifactMissing(RuntimeError):
    """A stage input (checkpoint, certification report) is absent."""


# builders

def build_system(cfg: ExperimentConfig):
    s = cfg.system
    return benchmark_system(s.h_seed, h_hidden=s.h_hidden, h_weight_std=s.h_weight_std,
                            drift_coeff=s.drift_coeff, input_gain=s.input_gain, mu_base=s.mu_base,
                            mu_slope=s.mu_slope, sigma_base=s.sigma_base, sigma_slope=s.sigma_slope,
                            lambda_mu_reading=s.lambda_mu_reading, uncertainty_scale=s.uncertainty_scale,
                            horizon=cfg.partition.horizon)


def build_expert(cfg: ExperimentConfig, sys):
    return expert_policy(sys.h, cfg.system.k_gain, cfg.system.expert_sign)


def build_partition(cfg: ExperimentConfig) -> Partition:
    p = cfg.partition
    return Partition(p.horizon, p.k, p.substeps)


def _law(kind, center, half_width, std, dim):
    return InitialLaw(kind, dim, tuple(center), half_width, std)


def build_law(cfg: ExperimentConfig, dim: int = 4) -> InitialLaw:
    d = cfg.initial_law
    return _law(d.kind, d.center, d.half_width, d.std, dim)


def build_coupling(cfg: ExperimentConfig, dim: int = 4) -> CouplingSpec:
    e = cfg.evaluation
    law = build_law(cfg, dim)
    if e.coupling == "synchronous":
        return CouplingSpec("synchronous", law)
    if e.coupling == "shifted":
        return CouplingSpec("shifted", law, shift=tuple(e.shift), scale=e.scale)
    return CouplingSpec("independent", law, _law(e.bar_kind, e.bar_center, e.bar_half_width, e.bar_std, dim))


def build_l1(cfg: ExperimentConfig, **overrides) -> L1Config:
    values = cfg.l1.model_dump()
    values.update(overrides)
    return L1Config(**values)


def optimizer_config(cfg: ExperimentConfig, terms: str = "both") -> OptimizerConfig:
    t = cfg.training
    return OptimizerConfig(lr=t.lr, steps=t.steps, beta_start=t.beta_start, beta_end=t.beta_end,
                           smoothing=t.smoothing, terms=terms, jac_norm=t.jac_norm)


# manifest

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


class RunManifest:
    """Config snapshot, artifact checksums, versions, timings and certification results."""

    def __init__(self, command: str, cfg: ExperimentConfig, directory: Path, workers: int = 1):
        self.path = Path(directory) / "manifest.json"
        self.doc = {"command": command, "status": "running",
                    "config": json.loads(to_json(cfg)),
                    "workers": workers,
                    "versions": {"drip": __version__, "numpy": np.__version__,
                                 "python": platform.python_version()},
                    "timings": {}, "certification": None, "results": {}, "artifacts": []}
        self._files = []
        self._t0 = time.perf_counter()
        self.write()

    def write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.doc, indent=2, sort_keys=True, default=_json_default))

    def add(self, *paths):
        self._files += [Path(p) for p in paths]

    def timing(self, name: str, seconds: float):
        self.doc["timings"][name] = round(seconds, 6)

    def finalize(self, status: str = "complete"):
        self.doc["artifacts"] = [{"file": str(p.relative_to(self.path.parent)) if p.is_relative_to(self.path.parent)
                                  else str(p), "sha256": sha256_file(p)} for p in self._files if p.exists()]
        self.doc["timings"]["total"] = round(time.perf_counter() - self._t0, 6)
        self.doc["status"] = status
        self.write()


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o)}")


def _dump(path, doc) -> Path:
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default))
    return path


# certify

def run_certify(cfg: ExperimentConfig, out: Path, workers: int = 1) -> dict:
    d = Path(out) / "certify"
    man = RunManifest("certify", cfg, d, workers)
    sys = build_system(cfg)
    expert = build_expert(cfg, sys)
    s = cfg.system
    report = {"certified": False, "probe_radius": s.probe_radius, "probes": s.probes}
    t0 = time.perf_counter()
    growth = fit_growth_constants(sys, s.probe_radius, s.growth_grid_points, seed=cfg.run.master_seed)
    report["growth"] = growth.as_dict()
    man.timing("growth", time.perf_counter() - t0)
    report["input_full_column_rank"] = bool(column_rank_ok(sys.input_operator(0.0)))
    t0 = time.perf_counter()
    X = np.random.default_rng(0).uniform(-1, 1, (64, sys.state_dim))
    analytic = sys.nominal_drift_jacobian(0.0, X) + sys.input_operator(0.0) @ expert.state_jacobian(X)
    report["jacobian_crosscheck_max_abs"] = float(np.max(np.abs(closed_loop_jacobian(sys, expert, 0.0, X) - analytic)))
    try:
        if not report["input_full_column_rank"]:
            raise CertificationFailed("input operator is rank deficient")
        lam = certify_contraction(sys, expert, s.probe_radius, s.probes, seed=cfg.run.master_seed)
    except CertificationFailed as exc:
        report["failure"] = {"message": str(exc),
                             "worst_point": None if exc.worst_point is None else exc.worst_point.tolist(),
                             "worst_time": exc.worst_time, "worst_value": exc.worst_value}
        path = _dump(d / "certification.json", report)
        man.add(path)
        man.doc["certification"] = report
        man.finalize("certification_failed")
        raise
    man.timing("contraction", time.perf_counter() - t0)
    report["lambda"] = lam
    report["theta_max"] = 2.0 * lam / growth.delta_g ** 2
    L_pi, L_dpi = estimate_lipschitz(expert, s.probe_radius, s.lipschitz_samples, seed=cfg.run.master_seed)
    report["lipschitz"] = {"L_pi": L_pi, "L_dpi": L_dpi}
    report["certified"] = True
    man.add(_dump(d / "certification.json", report))
    man.doc["certification"] = report
    man.finalize()
    log.info("certified lambda=%.6f delta_g=%.4f", lam, growth.delta_g)
    return report


def _read_certification(out: Path):
    path = Path(out) / "certify" / "certification.json"
    if not path.exists():
        return None
    return json.loads(path.read_text())


# train

def run_train(cfg: ExperimentConfig, out: Path, workers: int = 1, skip_certify: bool = False,
              bc: bool = False) -> dict:
    cert = _read_certification(out)
    if not skip_certify and (cert is None or not cert.get("certified")):
        raise CertificationFailed("no passing certification report; run certify first or pass --skip-certify")
    d = Path(out) / "train"
    man = RunManifest("train", cfg, d, workers)
    man.doc["certification"] = cert
    sys = build_system(cfg)
    expert = build_expert(cfg, sys)
    P = build_partition(cfg)
    t0 = time.perf_counter()
    ts = generate_training_data(sys, expert, build_law(cfg, sys.state_dim), cfg.training.n, P,
                                cfg.run.master_seed)
    man.add(ts.export(d / "training_data"))
    man.add(*sorted((d / "training_data").glob("expert_*.csv")))
    man.timing("data", time.perf_counter() - t0)
    widths = [sys.state_dim] + list(cfg.training.hidden) + [sys.input_dim]
    results = {}
    runs = [("tasil", "both")] + ([("bc", "value")] if bc else [])
    for name, terms in runs:
        t0 = time.perf_counter()
        policy, tlog = train_tasil(ts, widths, cfg.training.linear_skip, optimizer_config(cfg, terms),
                                   init_seed=cfg.training.init_seed)
        man.timing(f"train_{name}", time.perf_counter() - t0)
        man.add(*save_checkpoint(policy, d / f"{name}_policy"))
        man.add(tlog.to_csv(d / ("training_log.csv" if name == "tasil" else f"{name}_log.csv")))
        results[name] = {"best_loss": tlog.best_loss, "best_step": tlog.best_step,
                         "empirical_risk": tlog.empirical_risk}
    man.add(*save_checkpoint(mlp_matching_expert(expert), d / "expert_policy"))
    man.doc["results"] = results
    man.finalize()
    return results


def _load_policy(out: Path, checkpoint):
    path = Path(checkpoint) if checkpoint else Path(out) / "train" / "tasil_policy.json"
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    if not path.exists() or not path.with_suffix(".bin").exists():
        raise ArtifactMissing(f"checkpoint not found: {path}")
    return load_checkpoint(path), path


# evaluate

def _iss_rate(cfg, out, sys, expert):
    cert = _read_certification(out)
    if cert and cert.get("certified"):
        return cert["lambda"], cert["growth"]["delta_g"]
    s = cfg.system
    growth = fit_growth_constants(sys, s.probe_radius, s.growth_grid_points, seed=cfg.run.master_seed)
    return certify_contraction(sys, expert, s.probe_radius, s.probes, seed=cfg.run.master_seed), growth.delta_g


def iss_falsification(sys, expert, lam, delta_g, law: InitialLaw, partition: Partition, draws: int,
                      seed: int = 0, tol: float = 1e-6) -> dict:
    """Random (xi1, xi2, theta, perturbation) instances of the incremental-stability bound."""
    rng = RngStream(derive_seed(seed, "iss-draws")).generator()
    grid = theta_grid(lam, delta_g)
    worst, violations = np.inf, 0
    for _ in range(draws):
        xi1, xi2 = law.sample(2, RngStream(int(rng.integers(2 ** 63)))) * rng.uniform(0.5, 2.0)
        amp = rng.uniform(0.0, 2.0)
        values = amp * rng.standard_normal((partition.k, sys.input_dim))
        params = DeltaIssParams(lam, float(rng.choice(grid)), delta_g)
        chk = delta_iss_check(sys, expert, PerturbationSignal(values), xi1, xi2, params, partition)
        violations += chk.violations(tol)
        worst = min(worst, float(np.min(chk.margin)))
    return {"draws": draws, "violations": violations, "min_margin": worst, "tolerance": tol}


def run_evaluate(cfg: ExperimentConfig, out: Path, checkpoint=None, workers: int = 1) -> dict:
    policy, ck_path = _load_policy(out, checkpoint)
    d = Path(out) / "evaluate"
    man = RunManifest("evaluate", cfg, d, workers)
    sys = build_system(cfg)
    expert = build_expert(cfg, sys)
    P = build_partition(cfg)
    e = cfg.evaluation
    coupling = build_coupling(cfg, sys.state_dim)
    t0 = time.perf_counter()
    dec = gap_decomposition(policy, build_l1(cfg), expert, sys, coupling, e.ensemble_size, P,
                            cfg.run.master_seed, workers)
    man.timing("gaps", time.perf_counter() - t0)
    results = {"checkpoint": str(ck_path)}
    for rep in (dec.policy, dec.uncertainty, dec.total):
        rep.p_orders = tuple(e.p_orders)
        man.add(rep.to_csv(d / f"{rep.label}_gap.csv"), rep.to_json(d / f"{rep.label}_gap.json"))
        results[rep.label] = rep.summary()
    results["decomposition"] = {"pathwise_violation": dec.pathwise_violation(),
                                "mean_violation": dec.mean_violation()}
    results["tail"] = [vars(tc) | {"passed": tc.passed} for tc in (tail_check(dec.total, dl) for dl in e.deltas)]
    t0 = time.perf_counter()
    lam, delta_g = _iss_rate(cfg, out, sys, expert)
    results["delta_iss"] = iss_falsification(sys, expert, lam, delta_g, build_law(cfg, sys.state_dim), P,
                                             e.iss_draws, cfg.run.master_seed)
    xi, _ = coupling.sample(e.ensemble_size, cfg.run.master_seed)
    results["policy_gap_bound"] = policy_gap_bound(policy, expert, sys, xi, lam, delta_g, P)
    man.timing("delta_iss", time.perf_counter() - t0)
    man.add(_dump(d / "evaluation.json", results))
    man.doc["results"] = results
    man.finalize()
    return results


def policy_gap_bound(policy, expert, sys, xi, lam, delta_g, partition: Partition) -> dict:
    """Policy gap against gain(theta) * sup|pi_hat - pi*| along the learned rollouts.

    The sup is taken over the knots before t; the tightest admissible theta on
    the grid is used per knot.
    """
    A, a_div = _rk4_rollout(sys, policy, xi, partition)
    B, b_div = _rk4_rollout(sys, expert, xi, partition)
    ok = ~(a_div | b_div)
    lhs = np.linalg.norm(A[ok] - B[ok], axis=2)
    theta_vals = np.linalg.norm(policy.evaluate(A[ok].reshape(-1, sys.state_dim))
                                - expert.evaluate(A[ok].reshape(-1, sys.state_dim)), axis=1)
    theta_vals = theta_vals.reshape(lhs.shape)[:, :-1]
    sup = np.concatenate([np.zeros((lhs.shape[0], 1)), np.maximum.accumulate(theta_vals, axis=1)], axis=1)
    t = partition.knots
    best = np.full(len(t), np.inf)
    for theta in theta_grid(lam, delta_g):
        prm = DeltaIssParams(lam, float(theta), delta_g)
        best = np.minimum(best, prm.gain * np.sqrt(1.0 - np.exp(-prm.lambda_theta * t)))
    rhs = best[None, :] * sup
    margin = rhs - lhs
    return {"pairs": int(ok.sum()), "min_margin": float(np.min(margin)) if margin.size else None,
            "violations": int(np.sum(margin < -1e-6)), "max_policy_gap": float(lhs.mean(axis=0).max()),
            "max_bound": float(rhs.mean(axis=0).max()), "sup_theta": float(sup.max()) if sup.size else 0.0}


def _rk4_rollout(sys, policy, X0, partition):
    states, _, dtime = run_chunked("ode", sys, ControlSpec(sys, policy), X0, partition)
    return states, np.isfinite(dtime)


# figure 5

SCENARIOS = ("nominal", "uncertain_tasil", "uncertain_drip")


def figure5_rollouts(policy, expert, sys, l1: L1Config, coupling: CouplingSpec, count: int,
                     partition: Partition, master_seed: int = 0, workers: int = 1):
    """The three scenario ensembles plus the expert reference, on shared samples.

    Returns (reports, rollouts) keyed by scenario; rollouts hold (states, inputs, diverged_time).
    """
    xi, xi_bar = coupling.sample(count, master_seed)
    ref = run_chunked("euler", sys, ControlSpec(sys, expert), xi, partition, master_seed, workers)
    runs = {
        "nominal": run_chunked("euler", sys, ControlSpec(sys, policy), xi, partition, master_seed, workers),
        "uncertain_tasil": run_chunked("sde", sys, ControlSpec(sys, policy), xi_bar, partition,
                                       master_seed, workers),
        "uncertain_drip": run_chunked("sde", sys, ControlSpec(sys, policy, l1, partition.dt), xi_bar,
                                      partition, master_seed, workers),
    }
    ref_div = np.isfinite(ref[2])
    reports = {k: pair_report(v[0], np.isfinite(v[2]), ref[0], ref_div, partition, k) for k, v in runs.items()}
    return reports, runs, (xi, xi_bar)


def write_figure5_csv(path, reports, runs) -> Path:
    path = Path(path)
    times = reports["nominal"].times
    cols = ["t"] + [f"gap_{k}" for k in SCENARIOS] + [f"se_{k}" for k in SCENARIOS] + [f"diverged_{k}" for k in SCENARIOS]
    means = [reports[k].gap_mean for k in SCENARIOS]
    ses = [reports[k].gap_se for k in SCENARIOS]
    with path.open("w") as fh:
        fh.write(",".join(cols) + "\n")
        for i, t in enumerate(times):
            # paths diverged by this knot
            divs = [int(np.sum(runs[k][2] <= t + 1e-9)) for k in SCENARIOS]
            row = [repr(float(t))] + [repr(float(m[i])) for m in means] + [repr(float(s[i])) for s in ses]
            fh.write(",".join(row + [str(v) for v in divs]) + "\n")
    return path


def read_figure5_csv(path) -> dict:
    data = np.genfromtxt(path, delimiter=",", names=True)
    return {name: np.asarray(data[name]) for name in data.dtype.names}


def render_svg(path, times, series: dict, title: str = "total imitation gap") -> Path:
    """Self-contained SVG line chart of several series over a shared time axis."""
    W, H, L, R, T, B = 640, 400, 70, 20, 40, 50
    t = np.asarray(times, float)
    finite = [np.asarray(v, float)[np.isfinite(v)] for v in series.values()]
    ymax = max([float(v.max()) for v in finite if v.size] + [1e-12]) * 1.05
    sx = lambda x: L + (x - t[0]) / (t[-1] - t[0]) * (W - L - R)
    sy = lambda y: H - B - y / ymax * (H - T - B)
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">',
             f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<text x="{W / 2:.1f}" y="22" text-anchor="middle" font-size="14">{title}</text>',
             f'<line x1="{L}" y1="{H - B}" x2="{W - R}" y2="{H - B}" stroke="black"/>',
             f'<line x1="{L}" y1="{T}" x2="{L}" y2="{H - B}" stroke="black"/>']
    for frac in np.linspace(0, 1, 6):
        xv, yv = t[0] + frac * (t[-1] - t[0]), frac * ymax
        parts.append(f'<text x="{sx(xv):.1f}" y="{H - B + 18}" text-anchor="middle">{xv:.3g}</text>')
        parts.append(f'<text x="{L - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
    parts.append(f'<text x="{W / 2:.1f}" y="{H - 10}" text-anchor="middle">t [s]</text>')
    for j, (name, vals) in enumerate(series.items()):
        vals = np.asarray(vals, float)
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(t, vals) if np.isfinite(b))
        c = colors[j % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<line x1="{W - 190}" y1="{T + 14 * j + 6}" x2="{W - 170}" y2="{T + 14 * j + 6}" stroke="{c}" stroke-width="2"/>')
        parts.append(f'<text x="{W - 165}" y="{T + 14 * j + 10}">{name}</text>')
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n")
    return path


def _export_ensemble(directory, rollouts, initial, partition, master_seed, stochastic) -> Path:
    states, inputs, dtime = rollouts
    trajs = []
    for i in range(states.shape[0]):
        div = bool(np.isfinite(dtime[i]))
        prov = RngStream(master_seed, i).as_dict() if stochastic else "deterministic"
        trajs.append(Trajectory(partition, states[i], inputs[i], prov, div, float(dtime[i]) if div else None))
    return Ensemble(trajs, initial, master_seed).export(directory)


def run_figure5(cfg: ExperimentConfig, out: Path, checkpoint=None, workers: int = 1) -> dict:
    policy, ck_path = _load_policy(out, checkpoint)
    d = Path(out) / "figure5"
    man = RunManifest("figure5", cfg, d, workers)
    sys = build_system(cfg)
    expert = build_expert(cfg, sys)
    P = build_partition(cfg)
    coupling = build_coupling(cfg, sys.state_dim)
    t0 = time.perf_counter()
    reports, runs, _ = figure5_rollouts(policy, expert, sys, build_l1(cfg), coupling,
                                        cfg.evaluation.ensemble_size, P, cfg.run.master_seed, workers)
    man.timing("rollouts", time.perf_counter() - t0)
    man.add(write_figure5_csv(d / "figure5.csv", reports, runs))
    if cfg.evaluation.svg:
        man.add(render_svg(d / "figure5.svg", P.knots, {k: reports[k].gap_mean for k in SCENARIOS}))
    results = {"checkpoint": str(ck_path)}
    for k in SCENARIOS:
        rep = reports[k]
        rep.p_orders = tuple(cfg.evaluation.p_orders)
        man.add(rep.to_csv(d / f"gap_{k}.csv"), rep.to_json(d / f"gap_{k}.json"))
        mpath = _export_ensemble(d / f"ensemble_{k}", runs[k], coupling.as_dict(), P, cfg.run.master_seed,
                                 k != "nominal")
        man.add(mpath)
        results[k] = rep.summary()
    results["tail"] = [vars(tc) | {"passed": tc.passed}
                       for tc in (tail_check(reports["uncertain_drip"], dl) for dl in cfg.evaluation.deltas)]
    man.doc["results"] = results
    man.finalize()
    return results


# sweep

def run_sweep(cfg: ExperimentConfig, out: Path, checkpoint=None, workers: int = 1) -> list:
    policy, _ = _load_policy(out, checkpoint)
    d = Path(out) / "sweep"
    man = RunManifest("sweep", cfg, d, workers)
    sys = build_system(cfg)
    expert = build_expert(cfg, sys)
    P = build_partition(cfg)
    coupling = build_coupling(cfg, sys.state_dim)
    rows = []
    for omega in cfg.sweep.omega:
        for ts in cfg.sweep.ts:
            for lam in cfg.sweep.lambda_s:
                l1 = build_l1(cfg, omega=omega, ts=ts, lambda_s=lam)
                rep = total_gap(policy, l1, expert, sys, coupling, cfg.evaluation.ensemble_size, P,
                                cfg.run.master_seed, workers)
                i = rep.argmax_knot if rep.n_used else 0
                rows.append((omega, ts, lam, rep.max_gap, float(rep.gap_se[i]), rep.diverged_count))
    path = d / "sweep.csv"
    with path.open("w") as fh:
        fh.write("omega,ts,lambda_s,max_gap,max_gap_se,diverged_count\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) for v in r[:5]) + f",{r[5]}\n")
    man.add(path)
    man.doc["results"] = {"rows": len(rows)}
    man.finalize()
    return rows
