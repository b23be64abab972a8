"""Command-line entry point.

    adasp run [--config FILE] [--policy P] [--target T | --k-tokens K] [--schedule S]
              [--layer L|auto] [--seed N] [--repeats N] [--out DIR] [--sweep]
    adasp gen-fixture --out DIR [--seed N] [--audio-len N] [--text-len N] [--redundancy R]

Exit codes: 0 success, 2 config error, 3 run error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .bench import (
    ConfigError,
    RunConfig,
    entropy_rows_for,
    gen_fixture,
    load_config,
    parse_target,
    resolve_seed,
    run_once,
    run_sweep,
    write_entropy_csv,
)
from .metrics import system_cost_markdown, write_reports_csv
from .policies import POLICIES
from .schedule import SCHEDULE_KINDS

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 2, 3
COMMANDS = ("run", "gen-fixture")

log = logging.getLogger("adasp")


def _layer(value: str):
    return value if value == "auto" else int(value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adasp", description="Audio-token reduction benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one configuration or a policy x target sweep")
    run.add_argument("--config", type=Path, help="YAML config file")
    run.add_argument("--policy", choices=POLICIES)
    group = run.add_mutually_exclusive_group()
    group.add_argument("--target", help="FLOPs-reduction target: 0.3, 30 or 30%%")
    group.add_argument("--k-tokens", type=int, help="number of audio tokens to remove")
    run.add_argument("--schedule", choices=SCHEDULE_KINDS)
    run.add_argument("--layer", type=_layer, help="operation/start layer, or 'auto' for TE selection")
    run.add_argument("--seed", type=int, help=f"seed (falls back to config, then $ADASP_SEED)")
    run.add_argument("--repeats", type=int)
    run.add_argument("--out", type=Path)
    run.add_argument("--sweep", action="store_true", help="sweep policies x targets from the config")
    run.add_argument("--workers", type=int, help="sweep worker processes")
    run.add_argument("--audio-len", type=int)
    run.add_argument("--text-len", type=int)
    run.add_argument("--decode-steps", type=int)
    run.add_argument("-v", "--verbose", action="store_true")

    fx = sub.add_parser("gen-fixture", help="write seeded synthetic model and prompt files")
    fx.add_argument("--out", type=Path, required=True)
    fx.add_argument("--config", type=Path)
    fx.add_argument("--seed", type=int)
    fx.add_argument("--audio-len", type=int)
    fx.add_argument("--text-len", type=int)
    fx.add_argument("--redundancy", type=float)
    return parser


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    plan = cfg.plan
    if args.policy is not None:
        plan = replace(plan, policy=args.policy)
    if args.target is not None:
        plan = replace(plan, target=parse_target(args.target), k_tokens=None)
    if args.k_tokens is not None:
        plan = replace(plan, k_tokens=args.k_tokens, target=None)
    if args.schedule is not None:
        plan = replace(plan, schedule=args.schedule)
    if args.layer is not None:
        plan = replace(plan, layer=args.layer)
    fixture = cfg.fixture
    for flag, name in (("audio_len", "audio_len"), ("text_len", "text_len"), ("decode_steps", "decode_steps")):
        if getattr(args, flag) is not None:
            fixture = replace(fixture, **{name: getattr(args, flag)})
    cfg = replace(cfg, plan=plan, fixture=fixture, seed=resolve_seed(args.seed, cfg.seed if args.config else None))
    if args.repeats is not None:
        cfg = replace(cfg, repeats=args.repeats)
    if args.out is not None:
        cfg = replace(cfg, out=str(args.out))
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    return cfg


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = apply_overrides(cfg, args)
        cfg.validate()
        if args.sweep:
            cfg.sweep.validate()
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.sweep:
        failures = run_sweep(cfg, out)
        print(f"wrote {out / 'results.csv'} and {out / 'results.md'}")
        if failures:
            print(f"{failures} sweep cell(s) failed", file=sys.stderr)
            return EXIT_RUN
        return EXIT_OK

    try:
        outcome = run_once(cfg)
    except Exception as e:
        print(f"run error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUN
    with open(out / "results.csv", "w", newline="") as fh:
        write_reports_csv([outcome.report], fh)
    (out / "results.md").write_text(system_cost_markdown([outcome.report]))
    if outcome.entropy is not None:
        write_entropy_csv(entropy_rows_for(outcome, cfg.plan.policy, cfg.plan.target), out / "entropy_report.csv")
    r = outcome.report
    print(
        f"{r.policy} k_tokens={r.k_tokens} flops_reduction={r.flops_reduction_pct:.2f}% "
        f"rtf={r.rtf:.4f} throughput={r.throughput_tps:.2f} tok/s -> {out}"
    )
    return EXIT_OK


def cmd_gen_fixture(args) -> int:
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    seed = resolve_seed(args.seed, cfg.seed if args.config else None)
    fx = cfg.fixture
    try:
        gen_fixture(
            args.out,
            seed,
            args.audio_len if args.audio_len is not None else fx.audio_len,
            args.text_len if args.text_len is not None else fx.text_len,
            model=cfg.model,
            redundancy=args.redundancy if args.redundancy is not None else fx.redundancy,
            tokens_per_second=fx.tokens_per_second,
        )
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"run error: {e}", file=sys.stderr)
        return EXIT_RUN
    print(f"wrote fixture to {args.out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] not in COMMANDS and argv[0] not in ("-h", "--help"):
        argv.insert(0, "run")
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "gen-fixture":
        return cmd_gen_fixture(args)
    return cmd_run(args)


if __name__ == "__main__":
    sys.exit(main())
