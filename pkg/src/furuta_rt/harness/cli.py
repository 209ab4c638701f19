"""Command-line entry point: ``furuta-rt <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..model import read_model
from .config import ConfigError, ExperimentConfig, parse_config, with_overrides
from .experiments import ablate_horizon, bench_inference, predict_rollout
from .train import (
    TrainingDiverged, build, evaluate, load_checkpoints, train, write_summary, RunReport,
)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.method is not None:
        overrides["method"] = args.method
    if args.steps is not None:
        overrides["training_budget"] = args.steps
    return with_overrides(cfg, **overrides) if overrides else cfg


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args, cfg: ExperimentConfig) -> int:
    out = _out(args, f"runs/{cfg.method}-seed{cfg.seed}")
    rep = train(cfg, out)
    print(f"{cfg.method}: {rep.steps} steps, {rep.final_successes} final swing-ups, "
          f"outputs in {out}")
    return EXIT_OK


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    model, agent = load_checkpoints(args.ckpt)
    comp = build(cfg, model=model, agent=agent)
    summary = evaluate(cfg, comp, step=0, episodes=args.trials or cfg.eval_episodes)
    out = _out(args, "eval")
    (out / "episodes").mkdir(exist_ok=True)
    for i, lg in enumerate(summary.logs):
        lg.to_csv(out / "episodes" / f"eval_{i:02d}.csv")
    rep = RunReport(cfg.method, H_e=comp.delay.H_e, latency=comp.delay.latency)
    rep.final = summary
    rep.curve.append((0, summary.mean_return, summary.ci_half_width, summary.successes))
    write_summary(out / "summary.csv", rep)
    print(f"{cfg.method}: mean return {summary.mean_return:.2f}, "
          f"{summary.successes}/{len(summary.returns)} swing-ups")
    return EXIT_OK


def cmd_ablate(args, cfg: ExperimentConfig) -> int:
    horizons = [int(h) for h in args.horizons.split(",")]
    out = _out(args, "ablation")
    rows = ablate_horizon(cfg, horizons, args.ckpt, trials=args.trials or 10,
                          model_kind=args.model_kind, out_csv=out / "ablation.csv")
    for r in rows:
        print(f"H_p={r['horizon']:3d} H_e={r['H_e']}: return {r['mean_return']:.2f}")
    return EXIT_OK


def cmd_predict(args, cfg: ExperimentConfig) -> int:
    models = {}
    for spec in args.model:
        name, _, path = spec.rpartition("=")
        with open(path) as fh:
            models[name or Path(path).stem] = read_model(fh)
    out = _out(args, "prediction")
    predict_rollout(models, args.episode, args.horizon, out_csv=out / "prediction.csv")
    print(f"wrote {out / 'prediction.csv'}")
    return EXIT_OK


def cmd_bench(args, cfg: ExperimentConfig) -> int:
    out = _out(args, "bench")
    rows = bench_inference(cfg, trials=args.trials or 30, out_csv=out / "bench.csv")
    for r in rows:
        print(f"{r['method']:16s} H_p={r['H_p']:2d}  T_i={r['mean_ms']:.3f} ms  "
              f"H_e_min={r['H_e_min']}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--method", choices=("rt-hcp", "rt-mpc-baseline", "td3"))
    common.add_argument("--steps", type=int, help="training budget in plant ticks")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="furuta-rt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("train", parents=[common], help="train and evaluate one method")
    sp.set_defaults(func=cmd_train)
    sp = sub.add_parser("eval", parents=[common], help="evaluate saved checkpoints")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--trials", type=int)
    sp.set_defaults(func=cmd_eval)
    sp = sub.add_parser("ablate-horizon", parents=[common], help="planning-horizon sweep")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--horizons", default="5,10,15,20")
    sp.add_argument("--trials", type=int)
    sp.add_argument("--model-kind", choices=("residual", "data-driven"))
    sp.set_defaults(func=cmd_ablate)
    sp = sub.add_parser("predict-rollout", parents=[common],
                        help="open-loop model predictions against a logged episode")
    sp.add_argument("--model", action="append", required=True,
                    help="[name=]path to a model checkpoint; repeatable")
    sp.add_argument("--episode", required=True)
    sp.add_argument("--horizon", type=int, default=50)
    sp.set_defaults(func=cmd_predict)
    sp = sub.add_parser("bench-inference", parents=[common], help="time one plan per method")
    sp.add_argument("--trials", type=int)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        cfg = _load_config(args)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
