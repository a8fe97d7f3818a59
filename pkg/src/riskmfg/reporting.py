"""CSV and JSON artifacts of solves and experiments."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .errors import ArtifactError, RejectedInputError
from .measure_kit import AtomMeasure, Belief, GridMeasure
from .mfg_solver import MfgSolution, ModelSpec, Policy
from .nplayer_sim import GapReport

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def _clean(value: Any) -> Any:
    """Make a payload strict-JSON: NaN and infinities become ``None``."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.generic):
        return _clean(value.item())
    return value


def write_json(path: Path, payload: dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_csv(path: Path, frame: pd.DataFrame) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def _read_csv(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise ArtifactError(f"missing artifact {path}")
    try:
        return pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, OSError) as exc:
        raise ArtifactError(f"unreadable artifact {path}: {exc}") from exc


def write_solution(
    solution: MfgSolution,
    model: ModelSpec,
    out_dir: Path,
    config_hash: str,
    seeds: dict[str, int],
) -> dict[str, Any]:
    """Write ``u.csv``, ``alpha.csv``, ``m.csv``, ``mu_<t>.csv``, ``residuals.csv`` and ``summary.json``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    nodes = model.grid.nodes
    T = model.horizon

    write_csv(
        out_dir / "u.csv",
        pd.DataFrame(
            {
                "t": np.repeat(np.arange(T + 1), nodes.size),
                "x": np.tile(nodes, T + 1),
                "value": np.concatenate([u.values for u in solution.u]),
            }
        ),
    )
    write_csv(
        out_dir / "alpha.csv",
        pd.DataFrame(
            {
                "t": np.repeat(np.arange(T), nodes.size),
                "x": np.tile(nodes, T),
                "alpha": solution.policy.alpha.reshape(-1),
            }
        ),
    )
    write_csv(
        out_dir / "m.csv",
        pd.DataFrame(
            {
                "t": np.repeat(np.arange(T + 1), nodes.size),
                "x": np.tile(nodes, T + 1),
                "weight": np.concatenate([m.w for m in solution.m]),
            }
        ),
    )
    for t, mu in enumerate(solution.mu):
        write_csv(
            out_dir / f"mu_{t}.csv",
            pd.DataFrame({"x": mu.points[:, 0], "a": mu.points[:, 1], "weight": mu.weights}),
        )
    write_csv(
        out_dir / "residuals.csv",
        pd.DataFrame({"iteration": np.arange(len(solution.residuals)), "residual": solution.residuals}),
    )

    summary = {
        "converged": solution.converged,
        "iterations": solution.iterations,
        "best_iteration": solution.best_iteration,
        "final_residual": solution.residual,
        "value": solution.value,
        "u_slopes": [[u.slope_left, u.slope_right] for u in solution.u],
        "lipschitz": solution.policy.lipschitz_constants().tolist(),
        "config_hash": config_hash,
        "seeds": seeds,
    }
    write_json(out_dir / "summary.json", summary)
    logger.info("wrote solve artifacts to %s", out_dir)
    return summary


def load_solution(run_dir: Path, model: ModelSpec) -> tuple[Policy, Belief]:
    """Policy and mean-field belief of a previous solve, checked against ``model``."""
    if not run_dir.is_dir():
        raise ArtifactError(f"no solve directory at {run_dir}")
    T, n = model.horizon, model.grid.n
    alpha = _read_csv(run_dir / "alpha.csv")
    m = _read_csv(run_dir / "m.csv")
    try:
        alpha_values = alpha.sort_values(["t", "x"])["alpha"].to_numpy().reshape(T, n)
        terminal = m[m["t"] == T].sort_values("x")["weight"].to_numpy()
        joints = []
        for t in range(T):
            frame = _read_csv(run_dir / f"mu_{t}.csv")
            joints.append(AtomMeasure(frame[["x", "a"]].to_numpy(), frame["weight"].to_numpy()))
        return Policy(model.grid, alpha_values), Belief(tuple(joints), GridMeasure(model.grid, terminal))
    except (KeyError, ValueError, RejectedInputError) as exc:
        raise ArtifactError(f"solve artifacts in {run_dir} do not match the model: {exc}") from exc


def gap_frame(report: GapReport) -> pd.DataFrame:
    return pd.DataFrame({"N": report.n_values, "mean": report.means, "stderr": report.stderrs})


def write_gap_report(
    report: GapReport,
    out_dir: Path,
    config_hash: str,
    seeds: dict[str, int],
) -> tuple[Path, Path]:
    """``<statistic>.csv`` with ``N, mean, stderr`` and ``<statistic>.json`` with the fit."""
    csv_path = write_csv(out_dir / f"{report.statistic}.csv", gap_frame(report))
    json_path = write_json(
        out_dir / f"{report.statistic}.json",
        {
            "statistic": report.statistic,
            "reps": report.reps,
            "slope": report.slope,
            "intercept": report.intercept,
            "slope_band": [report.slope_low, report.slope_high],
            "config_hash": config_hash,
            "seeds": seeds,
        },
    )
    return csv_path, json_path
