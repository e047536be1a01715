"""CLI module using Click for command-line interface."""

from __future__ import annotations

import logging
import sys
from pathlib import Path
from typing import Optional

import click
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from .errors import ConfigParseError, ReallocationError


console = Console()

DEFAULT_CONFIG = Path("config.yaml")


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False, rich_tracebacks=True)],
        force=True,
    )


def _fail(error: ReallocationError) -> None:
    console.print(f"[red]Error:[/red] {error}")
    report = getattr(error, "report", None)
    if report is not None:
        console.print(_report_table(report, "Validation"))
    diagnostics = getattr(error, "diagnostics", None) or getattr(error.__cause__, "diagnostics", None)
    if diagnostics:
        console.print(f"[dim]Diagnostics: {diagnostics}[/dim]")
    sys.exit(error.exit_code)


def _parse_c_list(ctx: click.Context, param: click.Parameter, value: Optional[str]) -> Optional[list[float]]:
    if value is None:
        return None
    try:
        return [float(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter(f"expected a comma-separated list of numbers, got {value!r}")


def _report_table(report, title: str) -> Table:
    table = Table(title=title)
    table.add_column("Check", style="cyan")
    table.add_column("Status")
    table.add_column("Detail", style="dim")
    styles = {"pass": "green", "asserted": "yellow", "skipped": "dim", "fail": "red"}
    for check in report.checks:
        style = styles.get(check.status, "white")
        table.add_row(check.name, f"[{style}]{check.status}[/{style}]", check.detail)
    return table


def _resolve_config(config_path: Optional[Path]) -> Path:
    if config_path is not None:
        return config_path
    if DEFAULT_CONFIG.exists():
        return DEFAULT_CONFIG
    raise ConfigParseError("no --config given and no config.yaml in the working directory")


@click.group()
@click.version_option(version="0.1.0", prog_name="drra")
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging")
def cli(verbose: bool) -> None:
    """Distributed resource reallocation simulator.

    Feasible-iterate distributed optimization over a communication graph,
    with a centralized oracle and CSV experiment traces.
    """
    _setup_logging(verbose)


@cli.command()
@click.argument("family", type=click.Choice(["dispatch", "multi_resource"]))
@click.option("--n", "n", type=int, required=True, help="Number of nodes")
@click.option("--seed", type=int, default=0, show_default=True, help="Generator seed")
@click.option(
    "--out",
    type=click.Path(dir_okay=False, path_type=Path),
    help="Output JSON path (default: instances/<family><n>_s<seed>.json)",
)
@click.option("--c", "c", type=float, help="Barrier weight stored in the instance")
def gen(family: str, n: int, seed: int, out: Optional[Path], c: Optional[float]) -> None:
    """Generate a synthetic instance and write it as JSON.

    Examples:

        # 54-node dispatch instance
        drra gen dispatch --n 54 --seed 7

        # 118-node two-resource instance
        drra gen multi_resource --n 118 --seed 7 --out instances/multi118.json
    """
    from .bench import gen_command

    out = out or Path("instances") / f"{family}{n}_s{seed}.json"
    try:
        with console.status("[dim]Generating and validating...", spinner="dots"):
            inst = gen_command(family, n, seed, out, c)
    except ReallocationError as e:
        _fail(e)

    console.print(f"[green]✓[/green] Wrote {family} instance with n={inst.n} to {out}")
    console.print(f"  Edges: {inst.graph.num_edges}")
    console.print(f"  Coupling rows: m_in={inst.m_in}, m_eq={inst.m_eq}")


@cli.command()
@click.option(
    "-c",
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Instance or run configuration file (default: config.yaml)",
)
@click.option("--c", "c_values", callback=_parse_c_list, help="Comma-separated barrier weights")
@click.option("--iters", type=int, help="Iteration budget per barrier weight")
@click.option("--seed", type=int, help="Seed of the update-set selector")
@click.option("--init", "init", type=click.Choice(["even", "from-point"]), help="Initial share strategy")
@click.option("--stop", help="Stop rule: none, residual:TOL or plateau:TOL[:WINDOW]")
@click.option("--residual-every", type=int, help="Compute residuals every N iterations (0 = off)")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), help="Output directory")
def run(
    config_path: Optional[Path],
    c_values: Optional[list[float]],
    iters: Optional[int],
    seed: Optional[int],
    init: Optional[str],
    stop: Optional[str],
    residual_every: Optional[int],
    out: Optional[Path],
) -> None:
    """Run the reallocation algorithm and write CSV traces.

    Examples:

        # Use the default config.yaml
        drra run

        # Two barrier weights on the bundled instance
        drra run -c instances/dispatch10.json --c 1e-3,1e-7 --iters 2000

        # Stop once every neighborhood residual is tiny
        drra run -c config.yaml --stop residual:1e-8
    """
    from .bench import load_config, run_experiment
    from .engine import StopRule
    from .errors import ConfigSchemaError

    try:
        config, inst = load_config(_resolve_config(config_path))
        try:
            stop_rule = None if stop is None else StopRule.parse(stop)
        except ValueError as e:
            raise ConfigSchemaError(f"--stop: {e}") from e
        config = config.with_overrides(
            c_values=c_values,
            max_iters=iters,
            seed=seed,
            init=init,
            stop=stop_rule,
            residual_every=residual_every,
            out=out,
        )
    except ReallocationError as e:
        _fail(e)

    console.print()
    console.print("[bold]Configuration:[/bold]")
    console.print(f"  Instance: n={inst.n}, family={inst.family or 'custom'}, edges={inst.graph.num_edges}")
    console.print(f"  Barrier: {config.barrier_kind or inst.barrier.kind}, c = {config.effective_c(inst)}")
    console.print(f"  Iterations: {config.max_iters}, seed: {config.seed}, init: {config.init}")
    console.print(f"  Stop rule: {config.stop}")
    console.print(f"  Output: {config.out}")
    console.print()

    try:
        with console.status("[dim]Running...", spinner="dots") as status:

            def progress(c: float, record) -> None:
                if record.k % 100 == 0:
                    status.update(f"[dim]c={c:g}: iteration {record.k}, sum_phi={record.sum_phi:.10g}")

            result = run_experiment(config, inst, on_record=progress)
    except ReallocationError as e:
        _fail(e)

    table = Table(title=f"Runs (f* = {result.f_star:.12g})")
    table.add_column("c", style="cyan")
    table.add_column("Iterations", justify="right")
    table.add_column("Rel. objective error", justify="right")
    table.add_column("Max eq. error", justify="right")
    table.add_column("Mean |U|", justify="right")
    table.add_column("Messages", justify="right")
    table.add_column("Stopped by")
    table.add_column("Trace", style="dim")
    for summary in result.summaries:
        rel = "" if summary.final_rel_obj_err is None else f"{summary.final_rel_obj_err:.3e}"
        table.add_row(
            f"{summary.c:g}",
            str(summary.iterations),
            rel,
            f"{summary.max_feas_eq_err:.2e}",
            f"{summary.mean_update_size:.2f}",
            str(summary.total_messages),
            summary.stopped_by,
            summary.trace_file,
        )
    console.print(table)
    console.print(f"[dim]Traces and summary.json written to {result.out_dir}[/dim]")


@cli.command()
@click.option(
    "-c",
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Instance or run configuration file (default: config.yaml)",
)
@click.option(
    "--c",
    "c_values",
    callback=_parse_c_list,
    default="1e-2,1e-4,1e-6",
    show_default=True,
    help="Barrier weights for the sweep",
)
def oracle(config_path: Optional[Path], c_values: list[float]) -> None:
    """Solve the instance centrally and show the barrier gap per c."""
    from .bench import load_config
    from .oracle import barrier_sweep, solve_centralized_original

    try:
        _, inst = load_config(_resolve_config(config_path))
        with console.status("[dim]Solving centrally...", spinner="dots"):
            original = solve_centralized_original(inst)
            rows = barrier_sweep(inst, c_values, original.value)
    except ReallocationError as e:
        _fail(e)

    console.print(
        f"[bold]f*[/bold] = {original.value:.15g}  "
        f"(c = {original.c:g}, KKT residual {original.kkt_residual:.2e})"
    )
    if not original.monotone:
        console.print("[yellow]⚠[/yellow] sum(f) along the barrier path was not monotone")

    table = Table(title="Barrier sweep")
    table.add_column("c", style="cyan")
    table.add_column("F*(c)", justify="right")
    table.add_column("sum f(x*(c))", justify="right")
    table.add_column("Gap to f*", justify="right")
    for row in rows:
        table.add_row(f"{row['c']:g}", f"{row['F_star']:.12g}", f"{row['sum_f']:.12g}", f"{row['gap']:.3e}")
    console.print(table)


@cli.command()
@click.option(
    "-c",
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Instance or run configuration file (default: config.yaml)",
)
@click.argument("path", required=False, type=click.Path(exists=True, dir_okay=False, path_type=Path))
def validate(config_path: Optional[Path], path: Optional[Path]) -> None:
    """Check an instance: dimensions, rank, connectivity, compactness, Slater point.

    The instance is given with -c/--config or as a positional PATH.
    """
    from .bench import load_config
    from .model import validate_instance

    if config_path is not None and path is not None:
        raise click.UsageError("give the instance either with --config or as PATH, not both")
    try:
        _, inst = load_config(_resolve_config(config_path or path), validate=False)
        with console.status("[dim]Validating...", spinner="dots"):
            report = validate_instance(inst)
    except ReallocationError as e:
        _fail(e)

    console.print(_report_table(report, f"Instance checks (n={inst.n})"))
    if not report.ok:
        console.print(f"[red]✗[/red] {report.summary()}")
        sys.exit(3)
    console.print("[green]✓[/green] Instance is valid")


if __name__ == "__main__":
    cli()
