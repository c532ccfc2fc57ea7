from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional

import typer
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.markdown import Markdown
from rich.table import Table

from lorenzlab.config import ExperimentConfig, apply_overrides, config_hash, dump_config, load_config
from lorenzlab.events import (
    EVENT_ARTIFACT_WRITTEN,
    EVENT_GATE_FAILED,
    EVENT_STAGE_FINISHED,
    EVENT_STAGE_STARTED,
    Event,
    get_event_bus,
)
from lorenzlab.flow_core import SYSTEM_DEFAULTS, build_system
from lorenzlab.pipeline import EXIT_INPUT, EXIT_OK, run_pipeline
from lorenzlab.report import build_report

app = typer.Typer(add_completion=False, help="Numerical lab for Lorenz-like classes of flows.")
console = Console()


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


def _print_event(event: Event) -> None:
    data = event.data
    if event.type == EVENT_STAGE_STARTED:
        console.print(f"[bold]{data['stage']}[/bold] …")
    elif event.type == EVENT_STAGE_FINISHED:
        passed = data.get("passed")
        mark = "[green]pass[/green]" if passed else ("[red]fail[/red]" if passed is False else "[dim]done[/dim]")
        console.print(f"  {mark} in {data.get('wall_time', 0.0):.2f}s")
    elif event.type == EVENT_GATE_FAILED:
        console.print(f"  [red]gate failed[/red] in {data['stage']}: witness {data.get('witness')}")
    elif event.type == EVENT_ARTIFACT_WRITTEN:
        console.print(f"  [dim]wrote {data['path']}[/dim]")


def _load(config_path: Path) -> ExperimentConfig:
    try:
        return load_config(config_path)
    except ValidationError as exc:
        console.print(f"[red]Invalid config[/red] {config_path}:\n{exc}")
    except (ValueError, OSError) as exc:
        console.print(f"[red]Error:[/red] cannot read {config_path}: {exc}")
    raise typer.Exit(code=EXIT_INPUT)


@app.command()
def run(
    config_path: Path = typer.Argument(..., help="Experiment config (TOML)."),
    threads: Optional[int] = typer.Option(None, min=1, max=256, help="Worker threads (default: all cores)."),
    output: Optional[Path] = typer.Option(None, help="Run directory (overrides the config)."),
    seed: Optional[int] = typer.Option(None, min=0, help="RNG seed (overrides the config)."),
    tol: Optional[float] = typer.Option(None, help="Integration tolerance (overrides the config)."),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging."),
) -> None:
    """Run every stage of a config and write the manifest."""
    _setup_logging(verbose)
    config = _load(config_path)
    try:
        config = apply_overrides(config, seed=seed, tol=tol, output=output, threads=threads)
    except ValidationError as exc:
        console.print(f"[red]Invalid override:[/red]\n{exc}")
        raise typer.Exit(code=EXIT_INPUT)

    console.print(f"Run: [bold]{config.output}[/bold] ({config.system.name}, seed {config.seed})")
    bus = get_event_bus()
    bus.on("*", _print_event)
    try:
        manifest = run_pipeline(config, bus=bus)
    except OSError as exc:
        console.print(f"[red]Error:[/red] cannot write to {config.output}: {exc}")
        raise typer.Exit(code=EXIT_INPUT)
    finally:
        bus.off("*", _print_event)

    if manifest.exit_code == EXIT_OK:
        console.print(f"[green]All gates passed.[/green] Manifest: {Path(config.output) / 'manifest.json'}")
    else:
        where = f" at stage {manifest.failed_stage}" if manifest.failed_stage else ""
        console.print(f"[red]{manifest.status}[/red]{where} (exit code {manifest.exit_code})")
    raise typer.Exit(code=manifest.exit_code)


@app.command()
def report(
    manifest_path: Path = typer.Argument(..., help="manifest.json or the run directory holding it."),
) -> None:
    """Print a one-page digest of a finished run."""
    try:
        text, warnings = build_report(manifest_path)
    except (ValueError, OSError) as exc:
        console.print(f"[red]Error:[/red] cannot read manifest {manifest_path}: {exc}")
        raise typer.Exit(code=EXIT_INPUT)
    console.print(Markdown(text))
    for warning in warnings:
        console.print(f"[yellow]Warning:[/yellow] {warning}")


@app.command("list-systems")
def list_systems() -> None:
    """List the built-in systems and their default parameters."""
    table = Table(title="Built-in systems")
    table.add_column("Name", style="bold")
    table.add_column("Dim", justify="right")
    table.add_column("Kind")
    table.add_column("Default parameters")
    for name, defaults in SYSTEM_DEFAULTS.items():
        try:
            system = build_system(name)
        except ValueError:
            # families without presets (linear) need their parameters
            system = build_system(name, **defaults)
        kind = "map" if system.discrete else "flow"
        params = ", ".join(f"{k}={v}" for k, v in defaults.items()) or "-"
        table.add_row(name, str(system.dim), kind, params)
    console.print(table)


@app.command()
def validate(config_path: Path = typer.Argument(..., help="Experiment config (TOML).")) -> None:
    """Parse a config, then echo it normalized together with its hash."""
    config = _load(config_path)
    console.print(dump_config(config), markup=False, highlight=False)
    console.print(f"config hash: {config_hash(config)}")


def main() -> None:
    app()


if __name__ == "__main__":
    main()
