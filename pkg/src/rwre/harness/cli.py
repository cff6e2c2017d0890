"""Command-line entry point: ``rwre <subcommand> [--config FILE] [--key value ...]``.

Flags name config keys either in full (``--law.epsilon 0.1``) or through the
short aliases below (``--epsilon 0.1``); dashes and underscores are
interchangeable.  Flags override the config file.  ``RWRE_OUTPUT_DIR``
overrides ``output.directory``.
"""

import argparse
import sys

from ..errors import ConfigError
from .config import FIELDS, parse_config, parse_config_text
from .runner import SUBCOMMANDS, run_subcommand, _report

ALIASES = {
    "alpha": "law.alpha",
    "epsilon": "law.epsilon",
    "family": "law.family",
    "atoms": "law.atoms",
    "samples": "mc.samples",
    "seed": "mc.seed",
    "workers": "mc.workers",
    "confirm_window": "mc.confirm_window",
    "bootstrap": "mc.bootstrap",
    "unit_size": "mc.unit_size",
    "n_max": "dp.n_max",
    "count": "sweep.count",
    "max_iter": "ldp.max_iter",
    "memory_cap": "dp.memory_cap",
    "envs": "dp.envs",
    "epsilons": "sweep.epsilons",
    "radius": "sweep.radius",
    "x": "ldp.x",
    "tol": "ldp.tol",
    "trials": "identity.trials",
    "gamma_scan": "regen.gamma_scan",
    "n_list": "mgf.n_list",
    "mode": "mgf.mode",
    "output": "output.directory",
}

# aliases whose target depends on the subcommand
CONTEXT_ALIASES = {
    "verify-identity": {"n": "identity.n", "theta": "identity.theta"},
    "mgf": {"n": "dp.n_max", "theta": "mgf.theta"},
}


def resolve_key(name, subcommand):
    key = name.replace("-", "_")
    if key in FIELDS:
        return key
    ctx = CONTEXT_ALIASES.get(subcommand, {})
    if key in ctx:
        return ctx[key]
    if key == "n":
        return "dp.n_max"
    if key in ALIASES:
        return ALIASES[key]
    raise ConfigError(f"unknown flag --{name}")


def parse_flags(tokens, subcommand):
    """Turn ``['--key', 'value', ...]`` into ``({config_key: text}, violations)``."""
    flags, violations = {}, []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            violations.append(f"unexpected argument {tok!r}")
            i += 1
            continue
        name, _, value = tok[2:].partition("=")
        if not value:
            if i + 1 >= len(tokens):
                violations.append(f"flag --{name} needs a value")
                break
            value = tokens[i + 1]
            i += 1
        try:
            flags[resolve_key(name, subcommand)] = value
        except ConfigError as exc:
            violations.extend(exc.violations)
        i += 1
    return flags, violations


def build_parser():
    parser = argparse.ArgumentParser(prog="rwre", description=__doc__.split("\n\n")[0])
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="line-oriented config file")
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args, rest = build_parser().parse_known_args(argv)
    try:
        flags, violations = parse_flags(rest, args.subcommand)
        if args.config:
            config = parse_config(args.config, flags, violations)
        else:
            config = parse_config_text("", flags, "<flags>", violations)
    except ConfigError as exc:
        _report(exc)
        return exc.exit_code
    return run_subcommand(args.subcommand, config)


if __name__ == "__main__":
    sys.exit(main())
