"""Command-line entry point: run, verify, stress, mask-dump, export."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path


def _cmd_run(args) -> int:
    from .config import RunConfig
    from .runner import read_status, resolve_output_dir, run_experiment

    cfg = RunConfig.load(args.config)
    out = Path(args.output_dir) if args.output_dir else resolve_output_dir(cfg)
    run_dir = run_experiment(cfg, out)
    st = read_status(run_dir)
    print(f"status={st['status']} steps={st['steps_completed']} run_dir={run_dir}")
    return 0


def _cmd_verify(args) -> int:
    from .verification import run_checks

    results = run_checks(args.theorem, seed=args.seed, quick=args.quick)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def _cmd_stress(args) -> int:
    from .config import RunConfig
    from .runner import resolve_output_dir, run_experiment, summarize_run

    base = RunConfig.load(args.config).replace(condition="exploding")
    root = Path(args.output_dir) if args.output_dir else resolve_output_dir(base)
    print("estimator,seed,status,spike_rate,reward_initial,reward_final")
    for est in args.estimators.split(","):
        for k in range(args.seeds):
            cfg = base.replace(estimator=est, seed=base.seed + k)
            s = summarize_run(run_experiment(cfg, root / f"{est}_seed{cfg.seed}"))
            print(f"{est},{cfg.seed},{s['status']},{s['spike_rate']:.4f},{s['reward_initial']:.4f},"
                  f"{s['reward_final']:.4f}")
    return 0


def _cmd_mask_dump(args) -> int:
    from .staircase import build_staircase_mask

    print(build_staircase_mask(args.n, args.block).to_text())
    return 0


def _cmd_export(args) -> int:
    from .runner import export_plot_data

    text = export_plot_data(args.run_dir, args.kind)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    from .runner import EXPORT_KINDS
    from .verification import CHECKS

    parser = argparse.ArgumentParser(prog="stabledrl-lab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment from a config file")
    p.add_argument("config")
    p.add_argument("--output-dir")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("verify", help="run property checks")
    p.add_argument("theorem", choices=("all",) + CHECKS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="smaller sample sizes")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("stress", help="paired runs under the exploding-weight condition")
    p.add_argument("config")
    p.add_argument("--estimators", default="grpo,stabledrl")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--output-dir")
    p.set_defaults(func=_cmd_stress)

    p = sub.add_parser("mask-dump", help="print the staircase attention mask as a 0/1 grid")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--block", type=int, required=True)
    p.set_defaults(func=_cmd_mask_dump)

    p = sub.add_parser("export", help="write plot data from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--kind", choices=EXPORT_KINDS, required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_export)
    return parser


def main(argv=None) -> int:
    from .config import ConfigError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
