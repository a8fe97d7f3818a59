"""Tests for cli module."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Callable

import pandas as pd
import pytest
import typer
from typer.testing import CliRunner

import riskmfg.cli as cli_module

runner = CliRunner()

REPO_ROOT = Path(__file__).resolve().parents[1]


class DummyStatus:
    """Simple context manager used by fake console.status()."""

    def __enter__(self) -> "DummyStatus":
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        return False


class DummyConsole:
    """Console double that avoids rich/encoding side effects in tests."""

    def __init__(self) -> None:
        self.print_calls: list[tuple[tuple[Any, ...], dict[str, Any]]] = []
        self.json_calls: list[str] = []

    def print(self, *args: Any, **kwargs: Any) -> None:
        self.print_calls.append((args, kwargs))

    def print_json(self, text: str) -> None:
        self.json_calls.append(text)

    def status(self, *_args: Any, **_kwargs: Any) -> DummyStatus:
        return DummyStatus()


def _invoke(*args: str) -> Any:
    return runner.invoke(cli_module.app, list(args))


def test_version_callback_raises_exit(monkeypatch: pytest.MonkeyPatch) -> None:
    dummy_console = DummyConsole()
    monkeypatch.setattr(cli_module, "console", dummy_console)

    with pytest.raises(typer.Exit):
        cli_module.version_callback(True)

    assert len(dummy_console.print_calls) == 1


def test_info_command_prints_panel(monkeypatch: pytest.MonkeyPatch) -> None:
    dummy_console = DummyConsole()
    monkeypatch.setattr(cli_module, "console", dummy_console)
    cli_module.info_command()
    assert len(dummy_console.print_calls) == 1


def test_quantize_command_table_and_json(monkeypatch: pytest.MonkeyPatch) -> None:
    dummy_console = DummyConsole()
    monkeypatch.setattr(cli_module, "console", dummy_console)

    cli_module.quantize_command("gaussian", k=3, loc=0.0, scale=1.0, as_json=False)
    assert len(dummy_console.print_calls) == 2

    cli_module.quantize_command("uniform", k=2, loc=0.0, scale=1.0, as_json=True)
    atoms = json.loads(dummy_console.json_calls[0])["atoms"]
    assert len(atoms) == 2
    assert sum(a["w"] for a in atoms) == pytest.approx(1.0)


def test_quantize_command_unknown_law(monkeypatch: pytest.MonkeyPatch) -> None:
    dummy_console = DummyConsole()
    monkeypatch.setattr(cli_module, "console", dummy_console)
    with pytest.raises(typer.Exit) as exc_info:
        cli_module.quantize_command("cauchy", k=3, loc=0.0, scale=1.0, as_json=False)
    assert exc_info.value.exit_code == cli_module.EXIT_CONFIG


def test_validate_accepts_small_model(write_config: Callable[..., Path]) -> None:
    result = _invoke("validate", str(write_config()))
    assert result.exit_code == 0, result.output


def test_validate_flags_an_extreme_cvar(write_config: Callable[..., Path]) -> None:
    path = write_config(model={"ambiguity": {"kind": "cvar", "alpha": 0.05}})
    result = _invoke("validate", str(path))
    assert result.exit_code == cli_module.EXIT_ASSUMPTION


def test_solve_writes_artifacts(write_config: Callable[..., Path], isolated_workspace: Path) -> None:
    result = _invoke("solve", str(write_config()))
    assert result.exit_code == 0, result.output
    out_dir = isolated_workspace / "runs" / "small"
    summary = json.loads((out_dir / "summary.json").read_text(encoding="utf-8"))
    assert summary["converged"] is True
    assert summary["iterations"] == 1
    assert len(summary["config_hash"]) == 64
    assert (out_dir / "alpha.csv").exists()
    assert (out_dir / "mu_1.csv").exists()


def test_solve_seed_and_output_overrides(write_config: Callable[..., Path], isolated_workspace: Path) -> None:
    result = _invoke("solve", str(write_config()), "--seed", "7", "--out", "custom")
    assert result.exit_code == 0, result.output
    summary = json.loads((isolated_workspace / "custom" / "summary.json").read_text(encoding="utf-8"))
    assert set(summary["seeds"].values()) == {7}


def test_output_root_from_environment(
    write_config: Callable[..., Path],
    isolated_workspace: Path,
    monkeypatch: pytest.MonkeyPatch,
) -> None:
    monkeypatch.setenv("RISKMFG_OUTPUT_ROOT", str(isolated_workspace / "root"))
    result = _invoke("solve", str(write_config()))
    assert result.exit_code == 0, result.output
    assert (isolated_workspace / "root" / "runs" / "small" / "summary.json").exists()


def test_solve_without_convergence_exits_3(write_config: Callable[..., Path], isolated_workspace: Path) -> None:
    result = _invoke("solve", str(write_config(solver={"max_iter": 0})))
    assert result.exit_code == cli_module.EXIT_NOT_CONVERGED
    assert (isolated_workspace / "runs" / "small" / "summary.json").exists()


def test_zero_damping_is_a_config_error(write_config: Callable[..., Path]) -> None:
    result = _invoke("solve", str(write_config(solver={"damping": 0.0})))
    assert result.exit_code == cli_module.EXIT_CONFIG


def test_schema_error_exits_2(write_config: Callable[..., Path]) -> None:
    result = _invoke("solve", str(write_config(unexpected=True)))
    assert result.exit_code == cli_module.EXIT_CONFIG
    assert "ConfigError" in result.output


def test_bad_log_level_exits_2(write_config: Callable[..., Path]) -> None:
    result = _invoke("validate", str(write_config()), "--log-level", "LOUD")
    assert result.exit_code == cli_module.EXIT_CONFIG


def test_simulate_needs_a_solve(write_config: Callable[..., Path]) -> None:
    result = _invoke("simulate", str(write_config()))
    assert result.exit_code == cli_module.EXIT_MISSING_ARTIFACTS


def test_simulate_after_solve(write_config: Callable[..., Path], isolated_workspace: Path) -> None:
    path = write_config()
    assert _invoke("solve", str(path)).exit_code == 0
    result = _invoke("simulate", str(path), "--threads", "2")
    assert result.exit_code == 0, result.output
    out_dir = isolated_workspace / "runs" / "small"
    beliefs = pd.read_csv(out_dir / "belief_distance.csv")
    assert beliefs["N"].tolist() == [4, 16]
    assert (beliefs["mean"] > 0).all()
    deltas = pd.read_csv(out_dir / "delta_ell.csv")
    assert (deltas["mean"] == 0).all()


def test_simulate_reads_another_run_directory(write_config: Callable[..., Path], isolated_workspace: Path) -> None:
    path = write_config()
    assert _invoke("solve", str(path), "--out", "solved").exit_code == 0
    result = _invoke("simulate", str(path), "--run", "solved", "--out", "sims")
    assert result.exit_code == 0, result.output
    assert (isolated_workspace / "sims" / "delta_ell.json").exists()


def test_rates_on_a_dirac_are_zero(write_config: Callable[..., Path], isolated_workspace: Path) -> None:
    result = _invoke("rates", str(write_config()))
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(isolated_workspace / "runs" / "small" / "w1_d1.csv")
    assert frame["mean"].abs().max() < 1e-12


def test_oracle_writes_report(write_config: Callable[..., Path], isolated_workspace: Path) -> None:
    result = _invoke("oracle", str(write_config()))
    assert result.exit_code in (0, cli_module.EXIT_ASSUMPTION), result.output
    payload = json.loads((isolated_workspace / "runs" / "small" / "oracle.json").read_text(encoding="utf-8"))
    assert payload["passed"] == (result.exit_code == 0)
    assert payload["gap"] == pytest.approx(abs(payload["dp_value"] - payload["tree_value"]))


def test_oracle_passes_on_the_shipped_model(isolated_workspace: Path) -> None:
    result = _invoke("oracle", str(REPO_ROOT / "configs" / "oracle.json"), "--out", "oracle")
    assert result.exit_code == 0, result.output
    payload = json.loads((isolated_workspace / "oracle" / "oracle.json").read_text(encoding="utf-8"))
    assert payload["passed"] is True
    assert payload["gap"] <= 5e-3


def _snapshot(directory: Path) -> dict[str, bytes]:
    return {path.name: path.read_bytes() for path in sorted(directory.iterdir()) if path.is_file()}


def test_solve_rerun_is_bit_exact(write_config: Callable[..., Path], isolated_workspace: Path) -> None:
    path = write_config(
        model={"congestion": {"family": "mean_distance", "eta": 0.2, "theta": 0.5, "kappa": 0.0}},
        solver={"damping": 0.5, "tol": 1e-12, "max_iter": 6},
    )
    out_dir = isolated_workspace / "runs" / "small"
    first = _invoke("solve", str(path))
    assert first.exit_code == cli_module.EXIT_NOT_CONVERGED, first.output
    before = _snapshot(out_dir)
    assert "summary.json" in before
    second = _invoke("solve", str(path))
    assert second.exit_code == first.exit_code
    assert _snapshot(out_dir) == before


def test_simulate_does_not_depend_on_threads(write_config: Callable[..., Path], isolated_workspace: Path) -> None:
    path = write_config()
    assert _invoke("solve", str(path), "--out", "solved").exit_code == 0
    for threads in ("1", "2"):
        result = _invoke("simulate", str(path), "--run", "solved", "--out", f"sims{threads}", "--threads", threads)
        assert result.exit_code == 0, result.output
    for name in ("belief_distance.csv", "delta_ell.csv"):
        assert (isolated_workspace / "sims1" / name).read_bytes() == (isolated_workspace / "sims2" / name).read_bytes()


def test_oracle_tree_cap_exits_5(write_config: Callable[..., Path]) -> None:
    result = _invoke("oracle", str(write_config(oracle={"tree_cap": 1})))
    assert result.exit_code == cli_module.EXIT_CAP
