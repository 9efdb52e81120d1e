"""Command line entry point: ``eve-rl`` or ``python -m eve_rl``.

Exit codes: 0 success, 2 usage error, 3 divergence abort, 4 oracle failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from eve_rl import harness, oracles
from eve_rl.config import RunConfig, parse_assignments
from eve_rl.errors import ConfigError, DivergenceError

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_ORACLE = 0, 2, 3, 4

# flag name -> flat config key
_FLAG_KEYS = {
    "env": "env",
    "size": "size",
    "agent": "kind",
    "episodes": "episodes",
    "seed_env": "seed_env",
    "seed_init": "seed_init",
    "seed_run": "seed_run",
    "out": "out",
    "acting": "acting",
    "bootstrap": "bootstrap",
    "fisher": "fisher",
    "activation": "activation",
}


def _config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="flat 'key = value' config file applied before other flags")
    g.add_argument("--env", choices=("deep_sea", "stochastic_deep_sea"))
    g.add_argument("--size", type=int, help="Deep Sea side length L")
    g.add_argument("--agent", choices=("eve", "dqn"))
    g.add_argument("--episodes", type=int)
    g.add_argument("--seed-env", type=int)
    g.add_argument("--seed-init", type=int)
    g.add_argument("--seed-run", type=int)
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    g.add_argument("--out", help="output CSV path (stdout when omitted)")
    g.add_argument("--acting", choices=("thompson", "eps-greedy", "uniform"))
    g.add_argument("--bootstrap", choices=("posterior", "mle"))
    g.add_argument("--fisher", choices=("noisy", "variance-reduced", "mle-gradient"))
    g.add_argument("--activation", choices=("leaky", "relu"))
    g.add_argument("--print-config", action="store_true", help="print the resolved config and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eve-rl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one agent and write per-episode metrics")
    _config_flags(p)
    p.add_argument("--progress", type=int, default=0, metavar="N", help="log every N episodes")

    p = sub.add_parser("sweep", help="one run per (value, seed), aggregated per value")
    _config_flags(p)
    p.add_argument("--param", required=True, help=f"one of {', '.join(harness.SWEEPABLE)}")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (used for the whole seed triple)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")

    p = sub.add_parser("probe", help="visit counts vs posterior std after uniform-random episodes")
    _config_flags(p)
    p.add_argument("--probe-episodes", type=int, default=100)
    p.add_argument("--samples", type=int, default=200, help="posterior draws per cell")

    sub.add_parser("oracle-check", help="run the numerical self-checks")

    p = sub.add_parser("print-config", help="print every config key with its resolved value")
    _config_flags(p)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = str(value)
    overrides.update(parse_assignments(args.set))
    return cfg.replace(**overrides)


def _emit(text: str, path: str) -> None:
    if path:
        harness.write_text(path, text)
    else:
        sys.stdout.write(text)


def _split(text: str) -> list[str]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    return items


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "oracle-check":
        results = oracles.run_all()
        for r in results:
            print(r.line())
        return EXIT_OK if all(r.passed for r in results) else EXIT_ORACLE
    try:
        cfg = resolve_config(args)
        if args.command == "print-config" or args.print_config:
            sys.stdout.write(cfg.to_text())
            return EXIT_OK
        if args.command == "run":
            metrics = harness.run(cfg, progress_every=args.progress)
            _emit(harness.metrics_csv(cfg, metrics), cfg.out)
            print(f"success fraction {metrics.success_fraction:.3f}, solved {int(metrics.solved)}, "
                  f"{metrics.wall_clock:.1f}s", file=sys.stderr)
        elif args.command == "sweep":
            seeds = [int(s) for s in _split(args.seeds)]
            rows = harness.sweep(cfg, args.param, _split(args.values), seeds, jobs=args.jobs)
            _emit(harness.sweep_csv(cfg, rows), cfg.out)
        elif args.command == "probe":
            result = harness.probe_uncertainty(cfg, episodes=args.probe_episodes, n_samples=args.samples)
            _emit(harness.probe_csv(cfg, result), cfg.out)
            print(f"spearman(visits, std) = {result.spearman():.3f}", file=sys.stderr)
    except (ConfigError, ValueError) as exc:
        print(f"eve-rl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"eve-rl: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
