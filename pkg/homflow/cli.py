"""
Command-Line Interface for homflow

One verb per scenario kind plus ``report``, which aggregates run manifests
into a summary table.
"""

import logging
import sys
from typing import Optional

import click

from . import __version__
from .exceptions import ConfigError, HomflowError
from .harness.config import load_config
from .harness.runner import SUMMARY_NAME, run_scenario, summarize

logger = logging.getLogger(__name__)

ACCEPTANCE_FAILURE_EXIT = 2


def scenario_options(func):
    func = click.option("--seed", type=click.IntRange(min=0), default=None,
                        help="Override numerics.seed")(func)
    func = click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True,
                        help="FFT workers and corrector thread pool size")(func)
    func = click.option("--out", "out", type=click.Path(file_okay=False), default=None,
                        help="Override the output directory")(func)
    func = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True,
                        help="Scenario JSON file")(func)
    return func


def _run(scenario: str, config_path: str, out: Optional[str], threads: int, seed: Optional[int]) -> None:
    try:
        config = load_config(config_path).with_overrides(out, seed)
        if config.scenario != scenario:
            raise ConfigError([f"scenario: '{config_path}' describes '{config.scenario}', not '{scenario}'"])
        manifest = run_scenario(config, threads)
    except HomflowError as e:
        logger.error(f"{scenario} failed: {e}")
        raise click.ClickException(str(e))

    click.echo(f"{scenario}: {manifest.status} ({len(manifest.artifacts)} artifacts in {config.output_dir})")
    for failure in manifest.failures:
        click.echo(f"  acceptance failure: {failure}", err=True)
    if not manifest.ok:
        sys.exit(ACCEPTANCE_FAILURE_EXIT)


@click.group()
@click.version_option(__version__)
@click.option("--log-level", type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
              default="INFO", show_default=True)
def main(log_level: str):
    """
    homflow: periodic homogenization of 2D perfect fluid flows.

    Cell correctors, effective tensors, harmonic coordinates, cell and
    homogenized flows, and the epsilon convergence benchmark.
    """
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


@main.command()
@scenario_options
def cell(config_path: str, out: Optional[str], threads: int, seed: Optional[int]):
    """Solve the cell problems (stiff penalty ladder or lake)."""
    _run("cell", config_path, out, threads, seed)


@main.command()
@scenario_options
def tensor(config_path: str, out: Optional[str], threads: int, seed: Optional[int]):
    """Assemble the homogenized tensor and its consistency checks."""
    _run("tensor", config_path, out, threads, seed)


@main.command()
@scenario_options
def coord(config_path: str, out: Optional[str], threads: int, seed: Optional[int]):
    """Certify the corrected harmonic coordinates."""
    _run("coord", config_path, out, threads, seed)


@main.command("flow-micro")
@scenario_options
def flow_micro(config_path: str, out: Optional[str], threads: int, seed: Optional[int]):
    """Rotation vectors and Birkhoff averages of the cell flow."""
    _run("micro-flow", config_path, out, threads, seed)


@main.command("flow-macro")
@scenario_options
def flow_macro(config_path: str, out: Optional[str], threads: int, seed: Optional[int]):
    """Time-integrate the homogenized vorticity equation."""
    _run("macro-flow", config_path, out, threads, seed)


@main.command("eps-study")
@scenario_options
def eps_study(config_path: str, out: Optional[str], threads: int, seed: Optional[int]):
    """Resolved lake runs against the homogenized limit."""
    _run("eps-study", config_path, out, threads, seed)


@main.command()
@click.argument("directory", type=click.Path(exists=True, file_okay=False))
def report(directory: str):
    """Summarize every manifest.yaml under DIRECTORY."""
    try:
        frame = summarize(directory)
    except (OSError, TypeError, ValueError) as e:
        logger.error(f"Report failed: {e}")
        raise click.ClickException(str(e))
    failed = int((frame["status"] != "ok").sum()) if len(frame) else 0
    click.echo(f"{len(frame)} runs, {failed} failed; written to {directory}/{SUMMARY_NAME}")


if __name__ == '__main__':
    main()
