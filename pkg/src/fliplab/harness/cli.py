"""Command line entry point: ``fliplab {run,sweep,plot-data,validate-config,oracle}``.

Exit codes: 0 ok, 1 configuration error, 2 run failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from ..errors import ConfigError
from .config import ExperimentConfig, apply_overrides
from .runner import run
from .sweep import emit_plot_data, load_results, sweep

EXIT_OK, EXIT_CONFIG, EXIT_FAILURE = 0, 1, 2
log = logging.getLogger("fliplab")


def load_with_overrides(path: str, overrides: list[str]) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    return ExperimentConfig.from_dict(apply_overrides(doc, overrides))


def cmd_run(args) -> int:
    cfg = load_with_overrides(args.config, args.set)
    out = Path(args.out or cfg.out)
    seeds = [args.seed] if args.seed is not None else cfg.seeds
    code = EXIT_OK
    for seed in seeds:
        res = run(cfg, seed, out_dir=out)
        f = res.final
        print(f"{res.run_id}: {res.status} test_acc={f.get('test_acc')} sparsity={f.get('sparsity'):.6f}")
        if res.status != "ok":
            code = EXIT_FAILURE
    return code


def cmd_sweep(args) -> int:
    cfg = load_with_overrides(args.config, args.set)
    if args.kind:
        cfg = cfg.replace(sweep={"kind": args.kind})
    if args.seed is not None:
        cfg = cfg.replace(seeds=[args.seed])
    out = Path(args.out or cfg.out)
    rows = sweep(cfg, out_dir=out, workers=args.workers)
    for path in emit_plot_data(rows, out):
        print(f"wrote {path}")
    for r in rows:
        print(f"{r['label']:<32} ratio={r['compression_ratio']:>6} acc={r['mean_acc']} "
              f"std={r['std_acc']:.4f} n={r['n_seeds']} failed={r['n_failed']}")
    return EXIT_FAILURE if any(r["n_failed"] for r in rows) else EXIT_OK


def cmd_plot_data(args) -> int:
    try:
        rows = load_results(args.results)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read sweep results {args.results}: {exc}") from None
    out = Path(args.out or args.results)
    for path in emit_plot_data(rows, out):
        print(f"wrote {path}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_with_overrides(args.config, args.set)
    print(json.dumps(cfg.to_dict(), sort_keys=True, indent=1))
    return EXIT_OK


def cmd_oracle(args) -> int:
    from ..oracles import run_oracles

    seed = args.seed if args.seed is not None else 0
    report = run_oracles(seed=seed, trajectories=args.trajectories, length=args.length)
    worst = max(v for k, d in report.items() if k.startswith("grad_") for v in d.values())
    report["max_grad_rel_error"] = worst
    print(json.dumps(report, sort_keys=True, indent=1))
    return EXIT_OK if report["flips_match"] and worst <= 1e-5 else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fliplab", description="Iterative pruning experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-run progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=True):
        p.add_argument("--config", required=required, help="YAML or JSON experiment file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. method.lam=1.2 (repeatable)")

    p = sub.add_parser("run", help="train every seed of one configuration")
    with_config(p)
    p.add_argument("--seed", type=int, default=None, help="run only this seed")
    p.add_argument("--out", default=None, help="output directory (default: config 'out')")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a grid / curve / ablation sweep")
    with_config(p)
    p.add_argument("--kind", choices=["lambda_grid", "p_grid", "compression_curve", "noise_ablation"])
    p.add_argument("--seed", type=int, default=None, help="restrict the sweep to one seed")
    p.add_argument("--out", default=None)
    p.add_argument("--workers", type=int, default=None, help="parallel processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot-data", help="write CSV curve tables from a finished sweep")
    p.add_argument("--results", required=True, help="sweep output directory or results.json")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_plot_data)

    p = sub.add_parser("validate-config", help="parse a config and print it with defaults filled in")
    with_config(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("oracle", help="run the brute-force flip and gradient oracles")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--trajectories", type=int, default=1000)
    p.add_argument("--length", type=int, default=1000)
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
