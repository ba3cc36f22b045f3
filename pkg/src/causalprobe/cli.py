"""Command-line front end.

Exit codes: 0 success, 1 partial (shortfalls or review pending), 2 failure.
Flags mirror config keys and override the file when given.
"""
from __future__ import annotations

import sys
from pathlib import Path

import click

from . import runner
from .config import ConfigError, load_config


def _load(config_path: str, **overrides):
    try:
        return load_config(Path(config_path), overrides)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(runner.EXIT_FAILURE)


config_option = click.option(
    "-c", "--config", "config_path", required=True, type=click.Path(exists=True)
)
seed_option = click.option("--seed", type=int, default=None, help="Override config seed.")


@click.group()
@click.version_option()
def main() -> None:
    """Causality-probing experiment pipeline."""


@main.command()
@config_option
@seed_option
def ingest(config_path: str, seed: int | None) -> None:
    """Parse the corpus, write stats and the ingest report."""
    cfg = _load(config_path, seed=seed)
    sys.exit(runner.cmd_ingest(cfg))


@main.command()
@config_option
@seed_option
def perturb(config_path: str, seed: int | None) -> None:
    """Build the classification dataset (negatives plus balanced positives)."""
    cfg = _load(config_path, seed=seed)
    code = runner.cmd_perturb(cfg)
    if code == runner.EXIT_PARTIAL:
        click.echo("warning: positive shortfall, see shortfall.json", err=True)
    sys.exit(code)


@main.command()
@config_option
def index(config_path: str) -> None:
    """Build and persist the passage retrieval index."""
    cfg = _load(config_path)
    sys.exit(runner.cmd_index(cfg))


@main.command()
@config_option
@seed_option
@click.option("--max-cells", type=int, default=None, hidden=True)
def run(config_path: str, seed: int | None, max_cells: int | None) -> None:
    """Execute the action x layer x style x model grid."""
    cfg = _load(config_path, seed=seed)
    code = runner.cmd_run(cfg, max_cells=max_cells)
    if code == runner.EXIT_PARTIAL:
        click.echo("run partial: review pending or cells remaining", err=True)
    sys.exit(code)


@main.command()
@config_option
def review(config_path: str) -> None:
    """Import edited review files back into the verdict stores."""
    cfg = _load(config_path)
    sys.exit(runner.cmd_review_import(cfg))


@main.command()
@config_option
def score(config_path: str) -> None:
    """Run the perplexity separation study over the dataset."""
    cfg = _load(config_path)
    sys.exit(runner.cmd_score(cfg))


@main.command()
@config_option
def report(config_path: str) -> None:
    """Render metric tables and charts from stored verdicts."""
    cfg = _load(config_path)
    sys.exit(runner.cmd_report(cfg))


@main.command()
@config_option
@click.option("-n", "--sample-size", type=int, default=None)
def audit(config_path: str, sample_size: int | None) -> None:
    """Export a seeded sample of knowledge bundles for human relevance audit."""
    cfg = _load(config_path, audit_n=sample_size)
    sys.exit(runner.cmd_audit(cfg))


if __name__ == "__main__":
    main()
