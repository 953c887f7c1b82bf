"""Command-line entry points.

Subcommands: ``train`` (single run), ``sweep`` (grid of runs), ``account``
(privacy accounting only), ``quantile-demo`` (standalone clip tracker on a
lognormal stream), ``gen-data`` (write a synthetic task to CSV).  Exit
codes: 0 success, 1 configuration problem, 2 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace

import numpy as np
from scipy.stats import norm as _stdnorm

from .accountant import AccountantState, AccountingError, compose_and_convert, solve_noise_for_epsilon
from .calibration import CalibrationError
from .config import (
    ConfigError,
    load_config,
    parse_sweep,
    to_raw,
    validate_config,
)
from .data import IngestionError, generate_synthetic_task, write_task_csv
from .engine import DivergenceError, train
from .metrics import emit_metrics, format_float, resolved_summary
from .quantile import ClipState, QuantileConfig, UpdateRule, batch_fraction_below, update_clip
from .rng import RngStream, StreamLabel
from .sweep import run_sweep

logger = logging.getLogger(__name__)

# Substream of the DATA_GEN label used by the quantile demo's norm stream.
_DEMO_SUBSTREAM = 3


class _Parser(argparse.ArgumentParser):
    """Argparse that reports usage problems as config errors (exit 1)."""

    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="dpfedsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_train = sub.add_parser("train", help="run one federated training experiment")
    p_train.add_argument("--config", required=True, help="path to the JSON run config")
    p_train.add_argument("--out", help="output directory (overrides config output_dir)")
    p_train.add_argument("--seed", type=int, help="override the config master seed")
    p_train.add_argument("--workers", type=int, help="threads for per-round client fan-out")

    p_sweep = sub.add_parser("sweep", help="run a clip x noise x server-LR grid")
    p_sweep.add_argument("--config", required=True, help="JSON run config with sweep.* keys")
    p_sweep.add_argument("--out", help="output directory (overrides config output_dir)")
    p_sweep.add_argument("--seed", type=int, help="override the base master seed")
    p_sweep.add_argument("--workers", type=int, default=1, help="parallel sweep cells")

    p_acct = sub.add_parser("account", help="privacy accounting for a run shape")
    p_acct.add_argument("--q", type=float, required=True, help="client sampling probability")
    p_acct.add_argument("--rounds", type=int, required=True, help="number of rounds composed")
    p_acct.add_argument("--delta", type=float, required=True, help="target delta")
    group = p_acct.add_mutually_exclusive_group(required=True)
    group.add_argument("--z", type=float, help="noise multiplier to account for")
    group.add_argument("--target-epsilon", type=float, help="solve for the smallest z meeting this")
    p_acct.add_argument("--json", action="store_true", help="machine-readable output")

    p_demo = sub.add_parser(
        "quantile-demo", help="track a quantile of a lognormal stream with the clip updater"
    )
    p_demo.add_argument("--gamma", type=float, default=0.5, help="target quantile")
    p_demo.add_argument("--lr", type=float, default=0.2, help="tracker learning rate")
    p_demo.add_argument("--initial", type=float, default=0.1, help="initial estimate")
    p_demo.add_argument("--rounds", type=int, default=300)
    p_demo.add_argument("--rule", choices=["geometric", "linear"], default="geometric")
    p_demo.add_argument("--sigma-log", type=float, default=1.5, help="lognormal shape")
    p_demo.add_argument("--batch", type=int, default=100, help="samples per round")
    p_demo.add_argument("--seed", type=int, default=0)
    p_demo.add_argument("--json", action="store_true")

    p_gen = sub.add_parser("gen-data", help="write a synthetic task to CSV")
    p_gen.add_argument("--out", required=True, help="destination CSV path")
    p_gen.add_argument("--users", type=int, required=True)
    p_gen.add_argument("--examples", type=int, nargs=2, default=(10, 30), metavar=("LO", "HI"))
    p_gen.add_argument("--spread", type=float, default=1.0, help="user scale spread (>= 1)")
    p_gen.add_argument("--input-dim", type=int, default=10)
    p_gen.add_argument("--task", choices=["regression", "classification"], default="regression")
    p_gen.add_argument("--classes", type=int, default=2)
    p_gen.add_argument("--target-noise", type=float, default=0.1)
    p_gen.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_train(args) -> int:
    config = validate_config(load_config(args.config))
    if args.seed is not None:
        config = replace(config, master_seed=args.seed)
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers: must be at least 1")
        config = replace(config, client_workers=args.workers)
    result = train(config)
    out_dir = args.out or config.output_dir
    if out_dir:
        sigma_b = result.privacy.sigma_b if config.clip_mode == "adaptive" else None
        csv_path, json_path = emit_metrics(
            result.records,
            out_dir,
            to_raw(config, resolved_sigma_b=sigma_b),
            resolved_summary(result, config),
        )
        print(f"wrote {csv_path} and {json_path}")
    last = result.records[-1] if result.records else None
    if last is not None:
        print(
            f"rounds={len(result.records)} final_clip={format_float(last.clip_after)} "
            f"eval_loss={format_float(last.eval_loss)} eval_metric={format_float(last.eval_metric)}"
        )
    else:
        print("rounds=0 (no training performed)")
    return 0


def _cmd_sweep(args) -> int:
    spec = parse_sweep(load_config(args.config))
    if args.seed is not None:
        spec = replace(spec, base=replace(spec.base, master_seed=args.seed))
    if args.workers < 1:
        raise ConfigError("--workers: must be at least 1")
    out_dir = args.out or spec.base.output_dir
    rows = run_sweep(spec, out_dir=out_dir, workers=args.workers)
    print(f"{'setting':>10} {'param':>12} {'z':>8} {'best lr x':>10} {'metric':>14}")
    for row in rows:
        print(
            f"{row.setting:>10} {row.clip_param:>12.6g} {row.noise_multiplier:>8.4g} "
            f"{row.best_lr_multiplier:>10.4g} {row.best_metric:>14.8g}"
        )
    if out_dir:
        print(f"summary written under {out_dir}")
    return 0


def _cmd_account(args) -> int:
    if not 0.0 < args.q <= 1.0:
        raise ConfigError("--q: must lie in (0, 1]")
    if args.rounds < 0:
        raise ConfigError("--rounds: must be nonnegative")
    if not 0.0 < args.delta < 1.0:
        raise ConfigError("--delta: must lie in (0, 1)")
    if args.z is not None:
        if args.z <= 0:
            raise ConfigError("--z: must be positive (z = 0 offers no privacy to account)")
        state = AccountantState.create(args.q, args.z)
        spent = compose_and_convert(state, args.rounds, args.delta)
        payload = {
            "q": args.q, "z": args.z, "rounds": args.rounds, "delta": args.delta,
            "epsilon": spent.epsilon, "order": spent.order,
        }
        if args.json:
            print(json.dumps(payload, sort_keys=True))
        else:
            print(f"epsilon = {spent.epsilon:.6g} (best order {spent.order:g}) "
                  f"for q={args.q:g}, z={args.z:g}, T={args.rounds}, delta={args.delta:g}")
    else:
        if args.target_epsilon <= 0:
            raise ConfigError("--target-epsilon: must be positive")
        z = solve_noise_for_epsilon(args.q, args.rounds, args.delta, args.target_epsilon)
        spent = compose_and_convert(AccountantState.create(args.q, z), args.rounds, args.delta)
        payload = {
            "q": args.q, "rounds": args.rounds, "delta": args.delta,
            "target_epsilon": args.target_epsilon, "z": z, "epsilon": spent.epsilon,
            "order": spent.order,
        }
        if args.json:
            print(json.dumps(payload, sort_keys=True))
        else:
            print(f"z = {z:.6g} achieves epsilon = {spent.epsilon:.6g} <= {args.target_epsilon:g} "
                  f"(best order {spent.order:g})")
    return 0


def _cmd_quantile_demo(args) -> int:
    if not 0.0 <= args.gamma <= 1.0:
        raise ConfigError("--gamma: must lie in [0, 1]")
    if args.batch < 1:
        raise ConfigError("--batch: must be at least 1")
    cfg = QuantileConfig(gamma=args.gamma, eta=args.lr, c0=args.initial, rule=UpdateRule(args.rule))
    state = ClipState(value=cfg.c0)
    last_fraction = math.nan
    report_every = max(1, args.rounds // 10)
    for t in range(args.rounds):
        stream = RngStream(args.seed, StreamLabel.DATA_GEN, t, _DEMO_SUBSTREAM)
        norms = np.exp(args.sigma_log * stream.generator().standard_normal(args.batch))
        last_fraction = batch_fraction_below(norms, state.value)
        state = update_clip(state, last_fraction, cfg)
        if not args.json and ((t + 1) % report_every == 0 or t == 0):
            print(f"round {t + 1:>5}: clip={state.value:<12.6g} fraction_below={last_fraction:.3f}")
    true_quantile = float(np.exp(args.sigma_log * _stdnorm.ppf(args.gamma)))
    payload = {
        "gamma": args.gamma, "rounds": args.rounds, "rule": args.rule,
        "final_clip": state.value, "true_quantile": true_quantile,
        "final_fraction_below": last_fraction,
    }
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(f"final clip {state.value:.6g} vs true {args.gamma:g}-quantile {true_quantile:.6g}")
    return 0


def _cmd_gen_data(args) -> int:
    if args.users < 1:
        raise ConfigError("--users: must be at least 1")
    try:
        clients = generate_synthetic_task(
            seed=args.seed,
            num_users=args.users,
            examples_per_user=tuple(args.examples),
            spread=args.spread,
            input_dim=args.input_dim,
            task=args.task,
            num_classes=args.classes,
            target_noise=args.target_noise,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    write_task_csv(clients, args.out)
    total = sum(c.num_examples for c in clients)
    print(f"wrote {total} examples for {len(clients)} users to {args.out}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "sweep": _cmd_sweep,
    "account": _cmd_account,
    "quantile-demo": _cmd_quantile_demo,
    "gen-data": _cmd_gen_data,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except (ConfigError, CalibrationError, IngestionError, AccountingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
