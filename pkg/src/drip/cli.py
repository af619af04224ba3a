"""Command line entry point.

    drip certify  --config run.ini
    drip train    --config run.ini [--bc] [--skip-certify]
    drip evaluate --config run.ini [--checkpoint PATH]
    drip figure5  --config run.ini [--workers N]
    drip sweep    --config run.ini

Exit codes: 0 success, 1 configuration error, 2 certification failure,
3 training failure, 4 evaluation failure (including missing artifacts).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config

EXIT_OK, EXIT_CONFIG, EXIT_CERT, EXIT_TRAIN, EXIT_EVAL = 0, 1, 2, 3, 4

log = logging.getLogger("drip")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI or JSON config (a run manifest also works)")
    common.add_argument("--seed", type=int, help="override run.master_seed")
    common.add_argument("--workers", type=int, default=1, help="worker processes for ensemble rollouts")
    common.add_argument("--out", help="output root (default: $DRIP_OUT_DIR or ./drip_out)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="drip", description="Imitation learning under uncertainty: experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("certify", parents=[common], help="growth bounds, contraction rate, Lipschitz estimates")
    p = sub.add_parser("train", parents=[common], help="generate expert data and train the policy")
    p.add_argument("--bc", action="store_true", help="also train a value-only baseline")
    p.add_argument("--skip-certify", action="store_true", help="do not require a certification report")
    for name, text in (("evaluate", "gap estimates and stability checks"),
                       ("figure5", "nominal / uncertain / adaptive gap comparison"),
                       ("sweep", "adaptive-control parameter grid")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help="policy checkpoint (default: <out>/train/tasil_policy.json)")
    return parser


def _resolve(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = cfg.model_copy(update={"run": cfg.run.model_copy(update={"master_seed": args.seed})})
        cfg = ExperimentConfig.model_validate(cfg.model_dump())
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    out = Path(args.out or os.environ.get("DRIP_OUT_DIR") or "drip_out")
    return cfg, out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # heavy imports after argument parsing keep --help fast
    from . import experiments as ex
    from .metrics import CertificationFailed
    from .numerics import ContractViolation
    from .tasil import ExpertUnstable, TrainingAborted

    try:
        cfg, out = _resolve(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "certify":
            rep = ex.run_certify(cfg, out, args.workers)
            print(f"certified: lambda={rep['lambda']:.6f} delta_g={rep['growth']['delta_g']:.6f} "
                  f"delta_mu={rep['growth']['delta_mu']:.6f}")
        elif args.command == "train":
            res = ex.run_train(cfg, out, args.workers, args.skip_certify, args.bc)
            for name, r in res.items():
                print(f"{name}: best hard-max loss {r['best_loss']:.6g} at step {r['best_step']}")
        elif args.command == "evaluate":
            res = ex.run_evaluate(cfg, out, args.checkpoint, args.workers)
            for k in ("policy", "uncertainty", "total"):
                print(f"{k} gap: max {res[k]['max_gap']:.6g} (diverged {res[k]['diverged_count']})")
        elif args.command == "figure5":
            res = ex.run_figure5(cfg, out, args.checkpoint, args.workers)
            for k in ex.SCENARIOS:
                print(f"{k}: max gap {res[k]['max_gap']:.6g} (diverged {res[k]['diverged_count']})")
        elif args.command == "sweep":
            rows = ex.run_sweep(cfg, out, args.checkpoint, args.workers)
            print(f"sweep: {len(rows)} settings written")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CertificationFailed as exc:
        print(f"certification failed: {exc}", file=sys.stderr)
        return EXIT_CERT
    except (TrainingAborted, ExpertUnstable) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (ex.ArtifactMissing, ContractViolation) as exc:
        code = {"certify": EXIT_CERT, "train": EXIT_TRAIN}.get(args.command, EXIT_EVAL)
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
