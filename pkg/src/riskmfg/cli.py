"""CLI interface for riskmfg."""

from __future__ import annotations

import json
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

from .config import RunConfig, RuntimeSettings, config_manager
from .errors import ArtifactError, ConfigError, RiskMfgError, TreeCapError
from .measure_kit import moment
from .mfg_solver import (
    Policy,
    backward_pass,
    evaluate_policy_tree,
    fixed_point,
    forward_pass,
    perturbation_sweep,
    reachable_window,
    validate_model,
)
from .nplayer_sim import GapReport, SimConfig, belief_gap_experiment, deltaell_gap_experiment, fournier_guillin_rate
from .reporting import load_solution, write_gap_report, write_json, write_solution
from .risk import quantize_law
from .version import __version__

EXIT_OK = 0
EXIT_ASSUMPTION = 1
EXIT_CONFIG = 2
EXIT_NOT_CONVERGED = 3
EXIT_MISSING_ARTIFACTS = 4
EXIT_CAP = 5

app = typer.Typer(
    name="riskmfg",
    help="Risk-averse mean field game solver and N-player simulator",
    no_args_is_help=True,
)
console = Console()
logger = logging.getLogger("riskmfg")

ConfigArg = typer.Argument(..., help="Path to the JSON run configuration")
OutOpt = typer.Option(None, "--out", "-o", help="Output directory (defaults to output_dir of the config)")
ThreadsOpt = typer.Option(None, "--threads", "-j", help="Worker threads (default from RISKMFG_THREADS)")
SeedOpt = typer.Option(None, "--seed", help="Override every seed in the config")
LogLevelOpt = typer.Option(None, "--log-level", help="DEBUG, INFO, WARNING or ERROR")


def version_callback(value: bool) -> None:
    """Show version information."""
    if value:
        console.print(f"[bold cyan]riskmfg[/bold cyan] v{__version__}")
        raise typer.Exit()


@app.callback()
def main_callback(
    version: Optional[bool] = typer.Option(None, "--version", "-v", callback=version_callback, is_eager=True),
) -> None:
    """riskmfg - risk-averse mean field games."""


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False, rich_tracebacks=False)],
        force=True,
    )


def _exit_code(exc: RiskMfgError) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, ArtifactError):
        return EXIT_MISSING_ARTIFACTS
    if isinstance(exc, TreeCapError):
        return EXIT_CAP
    return EXIT_ASSUMPTION


@contextmanager
def _reported_errors() -> Iterator[None]:
    """Turn library errors into a red panel and the matching exit code."""
    try:
        yield
    except RiskMfgError as exc:
        code = _exit_code(exc)
        console.print(Panel(str(exc), title=f"[red]{type(exc).__name__}[/red]", border_style="red"))
        raise typer.Exit(code) from exc


class RunContext:
    """Config, settings and output directory resolved for one command."""

    def __init__(
        self,
        config_path: Path,
        out: Optional[Path],
        threads: Optional[int],
        seed: Optional[int],
        log_level: Optional[str],
    ) -> None:
        settings: RuntimeSettings = config_manager.load_settings()
        level = (log_level or settings.log_level).upper()
        if level not in ("DEBUG", "INFO", "WARNING", "ERROR"):
            raise ConfigError(f"unknown log level {log_level!r}")
        configure_logging(level)
        config = config_manager.load_config(config_path)
        self.config: RunConfig = config.with_seed(seed) if seed is not None else config
        self.threads = threads or settings.threads
        if self.threads < 1:
            raise ConfigError("--threads must be at least 1")
        base = Path(self.config.output_dir)
        if out is not None:
            self.out_dir = out
        elif settings.output_root is not None and not base.is_absolute():
            self.out_dir = settings.output_root / base
        else:
            self.out_dir = base
        self.config_hash = config_manager.config_hash(self.config)
        logger.info("loaded %s (config hash %s)", config_path, self.config_hash[:12])
        self.model = self.config.model.build()


@app.command(name="validate")
def validate_command(
    config: Path = ConfigArg,
    log_level: Optional[str] = LogLevelOpt,
) -> None:
    """Check the model assumptions of a run configuration."""
    with _reported_errors():
        ctx = RunContext(config, None, None, None, log_level)
        report = validate_model(ctx.model, seed=ctx.config.oracle.seed)

        trial = backward_pass(forward_pass(Policy.zero(ctx.model.grid, ctx.model.horizon), ctx.model).belief, ctx.model)
        lo, hi = reachable_window(ctx.model, trial.policy)
        grid = ctx.model.grid
        report.add("grid window", grid.x_min <= lo and hi <= grid.x_max, f"reachable [{lo:.4g}, {hi:.4g}]")

    table = Table(title="Model checks")
    table.add_column("Check", style="cyan")
    table.add_column("Result")
    table.add_column("Detail", style="dim")
    for name, passed, detail in report.checks:
        table.add_row(name, "[green]pass[/green]" if passed else "[red]FAIL[/red]", detail)
    console.print(table)
    for warning in report.warnings:
        console.print(f"[yellow]warning:[/yellow] {warning}")
    if not report.ok:
        raise typer.Exit(EXIT_ASSUMPTION)


@app.command(name="solve")
def solve_command(
    config: Path = ConfigArg,
    out: Optional[Path] = OutOpt,
    threads: Optional[int] = ThreadsOpt,
    seed: Optional[int] = SeedOpt,
    log_level: Optional[str] = LogLevelOpt,
) -> None:
    """Solve the mean field system by damped fixed-point iteration."""
    with _reported_errors():
        ctx = RunContext(config, out, threads, seed, log_level)
        solver = ctx.config.solver
        if solver.damping == 0:
            raise ConfigError("damping must be positive")
        with console.status("[bold green]Iterating...[/bold green]", spinner="dots"):
            solution = fixed_point(
                ctx.model,
                damping=solver.damping,
                tol=solver.tol,
                max_iter=solver.max_iter,
                distance_cap=solver.distance_cap,
                distance_seed=solver.distance_seed,
            )
        summary = write_solution(solution, ctx.model, ctx.out_dir, ctx.config_hash, ctx.config.seeds())

    table = Table(title="Solve summary")
    table.add_column("Field", style="cyan")
    table.add_column("Value", style="green")
    for key in ("converged", "iterations", "final_residual", "value"):
        table.add_row(key, str(summary[key]))
    table.add_row("output", str(ctx.out_dir))
    console.print(table)
    if not solution.converged:
        raise typer.Exit(EXIT_NOT_CONVERGED)


@app.command(name="simulate")
def simulate_command(
    config: Path = ConfigArg,
    out: Optional[Path] = OutOpt,
    threads: Optional[int] = ThreadsOpt,
    seed: Optional[int] = SeedOpt,
    log_level: Optional[str] = LogLevelOpt,
    run: Optional[Path] = typer.Option(None, "--run", help="Solve directory (defaults to the output directory)"),
) -> None:
    """Belief and delta-ell gap experiments for the N-player game."""
    with _reported_errors():
        ctx = RunContext(config, out, threads, seed, log_level)
        policy, reference = load_solution(run or ctx.out_dir, ctx.model)
        cfg = ctx.config.simulation.build(ctx.threads, ctx.config.solver.distance_cap)
        reports = [
            belief_gap_experiment(cfg, policy, ctx.model, reference),
            deltaell_gap_experiment(cfg, policy, ctx.model, reference),
        ]
        for report in reports:
            write_gap_report(report, ctx.out_dir, ctx.config_hash, ctx.config.seeds())
    _print_reports(reports)


@app.command(name="rates")
def rates_command(
    config: Path = ConfigArg,
    out: Optional[Path] = OutOpt,
    threads: Optional[int] = ThreadsOpt,
    seed: Optional[int] = SeedOpt,
    log_level: Optional[str] = LogLevelOpt,
) -> None:
    """Empirical-measure convergence rate of i.i.d. samples."""
    with _reported_errors():
        ctx = RunContext(config, out, threads, seed, log_level)
        rates = ctx.config.rates
        law = rates.law.build(rates.grid.build())
        cfg = SimConfig(
            n_values=tuple(rates.n_values),
            reps=rates.reps,
            seed=rates.seed,
            distance_cap=max(ctx.config.solver.distance_cap, 2 * max(rates.n_values)),
            threads=ctx.threads,
        )
        report = fournier_guillin_rate(law, rates.dimension, cfg)
        write_gap_report(report, ctx.out_dir, ctx.config_hash, ctx.config.seeds())
    _print_reports([report])


@app.command(name="oracle")
def oracle_command(
    config: Path = ConfigArg,
    out: Optional[Path] = OutOpt,
    seed: Optional[int] = SeedOpt,
    log_level: Optional[str] = LogLevelOpt,
) -> None:
    """Compare the dynamic-programming value with exact scenario-tree evaluation."""
    with _reported_errors():
        ctx = RunContext(config, out, None, seed, log_level)
        solver, oracle = ctx.config.solver, ctx.config.oracle
        if solver.damping == 0:
            raise ConfigError("damping must be positive")
        solution = fixed_point(
            ctx.model,
            damping=solver.damping,
            tol=solver.tol,
            max_iter=solver.max_iter,
            distance_cap=solver.distance_cap,
            distance_seed=solver.distance_seed,
        )
        tree_value = evaluate_policy_tree(ctx.model, solution.policy, solution.belief, oracle.tree_cap)
        sweep = perturbation_sweep(
            ctx.model,
            solution.policy,
            solution.belief,
            count=oracle.perturbations,
            scale=oracle.perturbation_scale,
            seed=oracle.seed,
            tree_cap=oracle.tree_cap,
        )
        gap = abs(solution.value - tree_value)
        result = {
            "dp_value": solution.value,
            "tree_value": tree_value,
            "gap": gap,
            "worst_perturbation_gap": sweep.worst_gap,
            "tolerance": oracle.tolerance,
            "passed": gap <= oracle.tolerance and sweep.worst_gap >= -oracle.tolerance,
            "config_hash": ctx.config_hash,
            "seeds": ctx.config.seeds(),
        }
        write_json(ctx.out_dir / "oracle.json", result)

    style = "green" if result["passed"] else "red"
    console.print(
        Panel(
            f"DP value      {result['dp_value']:.10g}\n"
            f"tree value    {result['tree_value']:.10g}\n"
            f"gap           {gap:.3e}\n"
            f"perturbations {oracle.perturbations}, worst gap {sweep.worst_gap:.3e}",
            title=f"[{style}]oracle {'passed' if result['passed'] else 'FAILED'}[/{style}]",
            border_style=style,
        )
    )
    if not result["passed"]:
        raise typer.Exit(EXIT_ASSUMPTION)


@app.command(name="quantize")
def quantize_command(
    law: str = typer.Argument(..., help="gaussian or uniform"),
    k: int = typer.Option(3, "--k", "-k", help="Number of atoms"),
    loc: float = typer.Option(0.0, "--loc", help="Mean (gaussian) or center (uniform)"),
    scale: float = typer.Option(1.0, "--scale", help="Std (gaussian) or half-width (uniform)"),
    as_json: bool = typer.Option(False, "--json", help="Print the atoms as a noise config entry"),
) -> None:
    """Quantize a continuous noise law into moment-matched atoms."""
    if law not in ("gaussian", "uniform"):
        console.print(f"[red]Unknown law: {law}[/red] (use gaussian or uniform)")
        raise typer.Exit(EXIT_CONFIG)
    with _reported_errors():
        noise = quantize_law(law, k, loc, scale)  # type: ignore[arg-type]
    atoms = [{"y": float(y), "w": float(w)} for y, w in zip(noise.support, noise.weights)]
    if as_json:
        console.print_json(json.dumps({"atoms": atoms}))
        return
    table = Table(title=f"{law} law, {k} atoms")
    table.add_column("y", style="cyan", justify="right")
    table.add_column("w", style="green", justify="right")
    for atom in atoms:
        table.add_row(f"{atom['y']:.12g}", f"{atom['w']:.12g}")
    console.print(table)
    console.print(f"[dim]second moment {moment(noise, 2.0):.12g}[/dim]")


@app.command(name="info")
def info_command() -> None:
    """Show information about riskmfg."""
    info_text = f"""
[bold cyan]riskmfg[/bold cyan] v{__version__}

[bold]Commands:[/bold]
  • validate  check moment caps, ambiguity sets, price bound, convexity of F
  • solve     damped fixed point of the mean field system
  • simulate  N-player belief and delta-ell gap experiments
  • rates     empirical-measure W1 convergence rate
  • oracle    dynamic programming value vs exact scenario tree
  • quantize  discretize a gaussian or uniform noise law

[bold]Exit codes:[/bold]
  0 ok, 1 assumption failure, 2 config error, 3 not converged,
  4 missing solve artifacts, 5 tree cap exceeded

[bold]Environment:[/bold]
  RISKMFG_THREADS / RISKMFG_LOG_LEVEL / RISKMFG_OUTPUT_ROOT
"""
    console.print(Panel(info_text, border_style="cyan"))


def _print_reports(reports: list[GapReport]) -> None:
    for report in reports:
        table = Table(title=f"{report.statistic} (slope {report.slope:.4f})")
        table.add_column("N", style="cyan", justify="right")
        table.add_column("mean", style="green", justify="right")
        table.add_column("stderr", justify="right")
        for n, mean, err in zip(report.n_values, report.means, report.stderrs):
            table.add_row(str(n), f"{mean:.6e}", f"{err:.2e}")
        console.print(table)


def main() -> None:
    """Main entry point."""
    app()


if __name__ == "__main__":
    main()
