#!/usr/bin/env python3
# Run from app/: python app.py <subcommand> --config runs/harmonic.toml
# Exit codes: 0 success, 2 infeasible or inconclusive, 1 error.
import logging
import sys

import click

import orchestrator
from config import load_config
from errors import ConfigError

config_option = click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
                             help="TOML run configuration.")
seed_option = click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), default=None,
                           help="Master seed, overrides the config.")
workers_option = click.option("--workers", type=click.IntRange(min=1), default=None,
                              help="Worker threads; results do not depend on it.")
out_option = click.option("--out", type=click.Path(file_okay=False), default=None,
                          help="Output directory, overrides the config.")


def run(op, config_path, seed, workers, out):
    try:
        cfg = load_config(config_path).with_overrides(seed=seed, workers=workers, out=out)
    except ConfigError as e:
        logging.error("%s", e)
        sys.exit(e.exit_code)
    sys.exit(orchestrator.run_command(op, cfg))


@click.group()
def cli():
    """Path-integral Monte Carlo for the generalized Pauli-Fierz semigroup."""


def register(op, help_text):
    @cli.command(name=op, help=help_text)
    @config_option
    @seed_option
    @workers_option
    @out_option
    def command(config_path, seed, workers, out):
        run(op, config_path, seed, workers, out)

    return command


register("kato", "Kato-class report for [potential].")
register("ls", "Lippmann-Schwinger solve and variable-mass cutoff tables.")
register("energy", "Ground-state energy from the decay of (f, T_t f).")
register("decay", "Decay envelope and bound-state profile.")
register("laws", "Semigroup, symmetry, diamagnetic and positivity checks.")


@cli.command()
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, exists=True),
              help="Output directory holding ledger.jsonl.")
@click.option("--index", type=int, default=-1, help="Ledger entry to replay (default: the last).")
@workers_option
def replay(out_dir, index, workers):
    """Re-run a ledger entry and compare its output digests."""
    sys.exit(orchestrator.cmd_replay(out_dir, index, workers))


def main():
    logging.basicConfig(level=logging.INFO)
    cli()


if __name__ == '__main__':
    main()
