"""
CLI interface for mccpde.
"""

import json
import logging
from pathlib import Path
from typing import Optional

import typer
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

from mccpde import __version__
from mccpde.errors import SOLVER_ERRORS, ConfigError, McCormickError
from mccpde.grid import Partition
from mccpde.instances import INSTANCES, build_problem
from mccpde.models import RelaxationKind, RuntimeSettings
from mccpde.pipeline import (
    CheckResult,
    ExperimentSummary,
    conservative_bound,
    load_config,
    run_experiment,
    run_invariant_suite,
)
from mccpde.relaxation import Envelope, RelaxationSpec, build, dump
from mccpde.utils import format_mesh_size, format_sci, format_seconds

app = typer.Typer(
    name="mccpde",
    help="Certified lower bounds for bilinear PDE-constrained control via McCormick relaxations.",
    no_args_is_help=True,
    rich_markup_mode="rich",
)
console = Console()

# Exit codes
EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INVALID = 2
EXIT_SOLVER = 3


def version_callback(value: bool) -> None:
    """Show version and exit."""
    if value:
        console.print(f"[bold blue]mccpde[/bold blue] v{__version__}")
        raise typer.Exit()


def _setup_logging(verbose: bool) -> None:
    level = "DEBUG" if verbose else RuntimeSettings().log_level
    logging.basicConfig(
        level=level,
        format="%(message)s",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


@app.callback()
def main(
    version: Optional[bool] = typer.Option(
        None,
        "--version",
        "-V",
        callback=version_callback,
        is_eager=True,
        help="Show version and exit.",
    ),
) -> None:
    """
    mccpde - McCormick relaxations for PDE-constrained optimal control.

    Lower bounds, bound tightening, a-priori certificates and upper bounds.
    """
    pass


@app.command()
def run(
    config_path: Path = typer.Argument(..., help="TOML experiment configuration"),
    output_dir: Path = typer.Option(
        Path("results"),
        "--output-dir",
        "-d",
        help="Directory for CSV, JSON and SVG outputs",
    ),
    long_running: bool = typer.Option(
        False,
        "--long-running",
        help="Also solve the fine coarse levels (slow)",
    ),
    output_format: str = typer.Option(
        "text",
        "--output",
        "-o",
        help="Output format: text or json",
    ),
    quiet: bool = typer.Option(
        False,
        "--quiet",
        "-q",
        help="Minimal output (just status)",
    ),
    verbose: bool = typer.Option(
        False,
        "--verbose",
        "-v",
        help="Show debug information",
    ),
) -> None:
    """
    Run an experiment and write its tables and figures.

    Examples:

        mccpde run configs/paper_1d.toml

        mccpde run configs/toy_oracle.toml -o json
    """
    _setup_logging(verbose)
    try:
        config = load_config(config_path)
    except ConfigError as e:
        _handle_error(e.message, e.code, output_format, quiet)
        raise typer.Exit(EXIT_INVALID)

    if not quiet and output_format == "text":
        console.print(f"\n[dim]Running {config.name} ({len(config.modes)} modes)...[/dim]")

    try:
        summary = run_experiment(config, output_dir, long_running=long_running or None)
    except SOLVER_ERRORS as e:
        _handle_error(e.message, e.code, output_format, quiet)
        raise typer.Exit(EXIT_SOLVER)
    except McCormickError as e:
        _handle_error(e.message, e.code, output_format, quiet)
        raise typer.Exit(EXIT_INVALID)
    except ValidationError as e:
        _handle_error(str(e), "VALIDATION_ERROR", output_format, quiet)
        raise typer.Exit(EXIT_INVALID)

    if output_format == "json":
        console.print(summary.model_dump_json(indent=2))
    elif quiet:
        console.print("PASS" if summary.passed else "FAIL")
    else:
        _output_rich(summary, verbose)

    raise typer.Exit(EXIT_OK if summary.passed else EXIT_CHECK_FAILED)


@app.command()
def check(
    fem_n: int = typer.Option(64, "--fem-n", "-n", help="FEM cells (multiple of 8)"),
    seed: int = typer.Option(0, "--seed", help="Seed of the sampled test functions"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Show debug information"),
) -> None:
    """
    Run the built-in invariant suite and print a PASS/FAIL table.
    """
    _setup_logging(verbose)
    try:
        results = run_invariant_suite(fem_n=fem_n, seed=seed)
    except McCormickError as e:
        _handle_error(e.message, e.code, "text", False)
        raise typer.Exit(EXIT_INVALID)

    console.print(_checks_table("Invariant suite", results))
    passed = all(r.passed for r in results)
    raise typer.Exit(EXIT_OK if passed else EXIT_CHECK_FAILED)


@app.command("dump-qp")
def dump_qp(
    config_path: Path = typer.Argument(..., help="TOML experiment configuration"),
    out: Path = typer.Argument(..., help="Output path of the QP triplet file"),
    level: Optional[int] = typer.Option(
        None,
        "--level",
        "-l",
        help="Coarse cells N_h; defaults to the first configured level",
    ),
    kind: RelaxationKind = typer.Option(
        RelaxationKind.FULLY_AVERAGED,
        "--kind",
        "-k",
        help="Relaxation: mcc, mcch or mcchh",
    ),
) -> None:
    """
    Write a relaxation QP in plain-text triplet form plus a JSON index map.
    """
    try:
        config = load_config(config_path)
        n = level or config.coarse_levels[0]
        if config.fem_n % n:
            raise ConfigError(f"Level {n} does not divide fem_n={config.fem_n}")
        control = n if kind == RelaxationKind.FULLY_AVERAGED else config.fem_n
        prob, u_d = build_problem(config, control_cells=control)
        coarse = prob.fem_grid if kind == RelaxationKind.POINTWISE else Partition(n_cells=n)
        env = Envelope.uniform(coarse, conservative_bound(config, prob), prob.w_bounds)
        spec = RelaxationSpec(kind=kind, prob=prob, env=env, alpha=config.alpha, u_d=u_d)
        built = build(spec)
        sidecar = dump(built, out)
    except McCormickError as e:
        _handle_error(e.message, e.code, "text", False)
        raise typer.Exit(EXIT_INVALID)

    console.print(
        f"[green]Wrote[/green] {out} ({built.qp.n} variables, {built.qp.m} rows) "
        f"and {sidecar}"
    )


@app.command()
def info() -> None:
    """
    Show bundled instances and relaxation kinds.
    """
    console.print("\n[bold blue]Bundled Instances[/bold blue]\n")

    table = Table(show_header=True)
    table.add_column("Instance", style="cyan")
    table.add_column("Description", style="dim")
    table.add_column("Known values", justify="right")
    for name, instance in INSTANCES.items():
        table.add_row(name, instance.description, str(len(instance.reference)))
    console.print(table)

    kinds = Table(title="Relaxations", show_header=True)
    kinds.add_column("Kind", style="cyan")
    kinds.add_column("State bounds on")
    kinds.add_row(RelaxationKind.POINTWISE.value, "FEM cells (pointwise state)")
    kinds.add_row(RelaxationKind.AVERAGED.value, "control cells, averaged state")
    kinds.add_row(RelaxationKind.FULLY_AVERAGED.value, "control cells, averaged state and control")
    console.print()
    console.print(kinds)
    console.print("\n[dim]Tip: MCCPDE_THREADS caps the threads of parallel OBBT sweeps.[/dim]\n")


def _handle_error(message: str, code: str, output_format: str, quiet: bool) -> None:
    """Handle and display errors."""
    if output_format == "json":
        console.print(json.dumps({
            "status": "ERROR",
            "error_code": code,
            "message": message,
        }))
    elif quiet:
        console.print(f"ERROR: {message}", style="red", markup=False)
    else:
        console.print()
        console.print(Panel(
            f"[red bold]Error:[/red bold] {_plain(message)}\n\n"
            f"[dim]Error Code: {code}[/dim]",
            title="Run Failed",
            border_style="red",
        ))


def _plain(text: str) -> str:
    return text.replace("[", "\\[")


def _checks_table(title: str, checks: list[CheckResult]) -> Table:
    table = Table(title=title, show_header=True)
    table.add_column("Check", style="cyan")
    table.add_column("Result", justify="center")
    table.add_column("Detail", style="dim")
    for c in checks:
        status = "[green]PASS[/green]" if c.passed else "[red]FAIL[/red]"
        table.add_row(c.name, status, _plain(c.detail))
    return table


def _output_rich(summary: ExperimentSummary, verbose: bool) -> None:
    """Output rich formatted summary."""
    console.print()

    bounds = Table(title="Bounds", show_header=True)
    bounds.add_column("Quantity", style="cyan")
    bounds.add_column("Value", justify="right")
    bounds.add_column("Known", justify="right", style="dim")
    for key, value in {**summary.lower_bounds, **summary.upper_bounds}.items():
        known = summary.reference.get(key)
        bounds.add_row(key, format_sci(value), format_sci(known) if known is not None else "")
    for key, value in summary.gaps.items():
        bounds.add_row(f"gap {key}", f"{100 * value:.3f}%", "")
    console.print(bounds)

    if summary.validated:
        table = Table(title="Validated lower bounds", show_header=True)
        table.add_column("h", justify="right")
        table.add_column("m", justify="right")
        table.add_column("conservative", justify="right")
        table.add_column("tight", justify="right")
        for row in summary.validated:
            m = row.m_obbt if row.m_obbt is not None else row.m_no_obbt
            if row.m_obbt is not None:
                cons, tight = row.lb_obbt_conservative, row.lb_obbt_tight
            else:
                cons, tight = row.lb_no_obbt_conservative, row.lb_no_obbt_tight
            mark = " *" if row.extrapolated else ""
            table.add_row(
                format_mesh_size(row.n_cells) + mark,
                format_sci(m) if m is not None else "",
                format_sci(cons) if cons is not None else "",
                format_sci(tight) if tight is not None else "",
            )
        console.print(table)

    if summary.checks:
        console.print(_checks_table("Consistency", summary.checks))

    status_text, status_color = (
        ("ALL CHECKS PASSED", "green") if summary.passed else ("CHECKS FAILED", "red")
    )
    lines = [f"[bold]Experiment:[/bold]  {summary.name}"]
    lines.append(f"[bold]Files:[/bold]       {len(summary.files)}")
    if summary.timings:
        total = sum(summary.timings.values())
        lines.append(f"[bold]Wall time:[/bold]   {format_seconds(total)}")
    console.print(Panel("\n".join(lines), title=status_text, border_style=status_color))

    if verbose:
        for path in summary.files:
            console.print(f"[dim]  {path}[/dim]")
        for stage, seconds in summary.timings.items():
            console.print(f"[dim]  {stage}: {format_seconds(seconds)}[/dim]")

    console.print()


if __name__ == "__main__":
    app()
