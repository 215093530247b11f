"""Command line entry point: ``arch-reg run | sweep | oracle``.

Any config key can be overridden on the command line as ``--key value``::

    arch-reg run --config exp.cfg --strategy smart --epochs 60
    arch-reg sweep --axis T_c --values 5,15,inf --epochs 45
    arch-reg oracle
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config, parse_pairs
from .experiment import resolve_out_dir, run_experiment, run_sweep
from . import oracle


def _split_overrides(extra: list[str]) -> list[tuple[str, str]]:
    pairs = []
    it = iter(extra)
    for token in it:
        if not token.startswith("--"):
            raise SystemExit(f"unexpected argument {token!r}; overrides look like --key value")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            try:
                value = next(it)
            except StopIteration:
                raise SystemExit(f"missing value for --{key}") from None
        pairs.append((key, value))
    return pairs


def _config_from(args, extra):
    try:
        return load_config(args.config, parse_pairs(_split_overrides(extra)))
    except (KeyError, ValueError) as exc:
        raise SystemExit(f"config error: {exc}") from None


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="arch-reg", description="Adversarial regularization with cached perturbations.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train one configuration (optionally several seeds)")
    p_run.add_argument("--config", help="key=value config file")

    p_sweep = sub.add_parser("sweep", help="parameter study over alpha, T_c, K or p")
    p_sweep.add_argument("--config", help="key=value config file")
    p_sweep.add_argument("--axis", required=True, help="alpha, T_c (cache_gap), K (k) or p")
    p_sweep.add_argument("--values", required=True, help="comma separated; T_c accepts 'inf'")
    p_sweep.add_argument("--seeds", type=int, default=3)
    p_sweep.add_argument("--jobs", type=int, default=1)

    sub.add_parser("oracle", help="run the brute-force cross-checks; exit 1 on any failure")

    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "oracle":
        if extra:
            parser.error(f"oracle takes no options, got {extra}")
        return 0 if oracle.run_all() else 1

    config = _config_from(args, extra)
    if args.command == "run":
        summaries = run_experiment(config)
        out = resolve_out_dir(config)
        for s in summaries:
            metric = s["metric"]
            print(f"{s['strategy']} seed={s['seed']} test_{metric}={s['test_' + metric]} "
                  f"fwd={s['forward_passes']} bwd={s['backward_passes']} "
                  f"grad_norm_var={s['grad_norm_variance']}")
        print(f"reports written to {out}")
        return 0

    values = [v.strip() for v in args.values.split(",") if v.strip()]
    try:
        path = run_sweep(config, args.axis, values, seeds=args.seeds, jobs=args.jobs)
    except ValueError as exc:
        raise SystemExit(f"sweep error: {exc}") from None
    print(f"sweep written to {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
