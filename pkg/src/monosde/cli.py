"""Command-line front end: ``monosde {simulate,malliavin,hormander,verify,density}``."""

from __future__ import annotations

import argparse
import json
import sys

from .config import COMMANDS, SUITES, ExperimentConfig, config_from_mapping, load_config
from .errors import ConfigError, DivergenceError, MemoryBudgetError, StepError
from .experiments import EXIT_CONFIG, EXIT_DIVERGENCE, run_experiment


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _params(text: str) -> dict:
    """``{"eta": 1}`` as JSON, or ``eta=1,c=0.5``."""
    text = text.strip()
    if text.startswith("{"):
        return json.loads(text)
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        key, _, val = item.partition("=")
        if not _:
            raise argparse.ArgumentTypeError(f"bad parameter {item!r}, expected key=value")
        out[key.strip()] = float(val)
    return out


def _bandwidth(text: str):
    return text if text == "silverman" else float(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="monosde", description="SDEs with monotone drift: paths, flows, Malliavin derivatives.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config; flags given here override its entries")
    common.add_argument("--model")
    common.add_argument("--params", type=_params)
    common.add_argument("--x0", type=_floats)
    common.add_argument("--T", type=float)
    common.add_argument("--steps", type=int)
    common.add_argument("--paths", type=int)
    common.add_argument("--scheme")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--workers", type=int)
    common.add_argument("--max-dt", dest="max_dt", type=float)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "malliavin":
            p.add_argument("--order", type=int)
            p.add_argument("--method")
            p.add_argument("--coarsen", type=int)
        elif name == "hormander":
            p.add_argument("--x", type=_floats)
            p.add_argument("--depth", type=int)
            p.add_argument("--tol", type=float)
        elif name == "verify":
            p.add_argument("--suites", type=lambda s: [v for v in s.split(",") if v], help=f"subset of {','.join(SUITES)}")
            p.add_argument("--epsilons", type=_floats)
            p.add_argument("--p-list", dest="p_list", type=_floats)
        elif name == "density":
            p.add_argument("--component", type=int)
            p.add_argument("--bandwidth", type=_bandwidth)
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    flags = {k: v for k, v in vars(args).items() if v is not None and k != "config"}
    if args.config:
        return load_config(args.config, flags)
    return config_from_mapping(flags)


def _report(cfg: ExperimentConfig, manifest) -> None:
    d = manifest.details
    if cfg.command == "hormander":
        print("depth  rank")
        for k, r in enumerate(d["rank_by_depth"]):
            print(f"{k:5d}  {r:4d}")
        if d["satisfied"]:
            print(f"satisfied at depth {d['depth_at_full_rank']}")
        else:
            print(f"not satisfied up to depth {cfg.depth} (inconclusive beyond it)")
    elif cfg.command == "verify":
        for name, ok in manifest.suites.items():
            print(f"{name:16s} {'PASS' if ok else 'FAIL'}")
    print(f"wrote {manifest.outputs[0]['path']}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        manifest = run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, StepError) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except MemoryBudgetError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _report(cfg, manifest)
    return manifest.exit_code


if __name__ == "__main__":
    sys.exit(main())
