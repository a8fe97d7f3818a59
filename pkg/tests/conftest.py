"""Shared fixtures for riskmfg tests."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import pytest

from riskmfg.convex_tools import PwlConvex
from riskmfg.measure_kit import Grid1D, GridMeasure
from riskmfg.mfg_solver import CongestionSpec, ModelSpec, PriceSpec
from riskmfg.risk import AmbiguitySet, DiscreteNoise, quantize_law


def make_model(
    *,
    horizon: int = 2,
    grid: Grid1D | None = None,
    initial: GridMeasure | None = None,
    noise: DiscreteNoise | None = None,
    ambiguity: AmbiguitySet | None = None,
    family: str = "mean_distance",
    eta: float | Sequence[float] = 0.0,
    theta: float | Sequence[float] = 0.5,
    kappa: float | Sequence[float] = 0.0,
    p0: float | Sequence[float] = 0.0,
    price_kappa: float = 0.0,
    clip: float = 1.0,
    moment_cap: float = 10.0,
) -> ModelSpec:
    grid = grid or Grid1D(-5.0, 5.0, 101)
    return ModelSpec(
        horizon=horizon,
        grid=grid,
        initial=initial or GridMeasure.gaussian(grid, 0.0, 0.5),
        noises=(noise or quantize_law("gaussian", 3, 0.0, 0.5),) * horizon,
        ambiguity=(ambiguity or AmbiguitySet.cvar(0.5),) * horizon,
        congestion=CongestionSpec.build(horizon, family, eta, theta, kappa),  # type: ignore[arg-type]
        price=PriceSpec.build(horizon, p0, price_kappa, clip),
        moment_cap=moment_cap,
    )


def random_convex(rng: np.random.Generator, grid: Grid1D) -> PwlConvex:
    """``a x^2 + b |x - c| + d`` sampled on ``grid`` with chord tails."""
    a = rng.uniform(0.0, 0.5)
    b = rng.uniform(0.0, 1.0)
    c = rng.uniform(-1.0, 1.0)
    d = rng.uniform(-0.5, 0.5)
    return PwlConvex.sample(grid, lambda x: a * x * x + b * np.abs(x - c) + d)


@pytest.fixture
def model_factory() -> Callable[..., ModelSpec]:
    return make_model


@pytest.fixture
def convex_factory() -> Callable[[np.random.Generator, Grid1D], PwlConvex]:
    return random_convex


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


def small_run_config(**sections: Any) -> dict[str, Any]:
    """A run configuration that solves in well under a second."""
    config: dict[str, Any] = {
        "version": 1,
        "model": {
            "horizon": 2,
            "grid": {"x_min": -5.0, "x_max": 5.0, "n": 61},
            "initial": {"kind": "gaussian", "mean": 0.0, "std": 0.8},
            "noise": {"atoms": [{"y": -0.5, "w": 0.5}, {"y": 0.5, "w": 0.5}]},
            "ambiguity": {"kind": "cvar", "alpha": 0.5},
            "congestion": {"family": "mean_distance", "eta": 0.0, "theta": 0.5, "kappa": 0.0},
            "price": {"p0": 0.2, "kappa": 0.0, "clip": 1.0},
        },
        "solver": {"damping": 1.0, "tol": 1e-12, "max_iter": 5},
        "simulation": {"n_values": [4, 16], "reps": 3, "seed": 1, "distance_atoms": 32},
        "oracle": {"perturbations": 5, "perturbation_scale": 0.1, "tolerance": 0.02},
        "rates": {"law": {"kind": "delta", "at": 0.5}, "n_values": [4, 8], "reps": 2},
        "output_dir": "runs/small",
    }
    for name, value in sections.items():
        if isinstance(value, dict) and isinstance(config.get(name), dict):
            config[name] = {**config[name], **value}
        else:
            config[name] = value
    return config


@pytest.fixture
def isolated_workspace(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> Path:
    monkeypatch.chdir(tmp_path)
    for name in ("RISKMFG_THREADS", "RISKMFG_LOG_LEVEL", "RISKMFG_OUTPUT_ROOT"):
        monkeypatch.delenv(name, raising=False)
    return tmp_path


@pytest.fixture
def write_config(isolated_workspace: Path) -> Callable[..., Path]:
    def _write(name: str = "run.json", **sections: Any) -> Path:
        path = isolated_workspace / name
        path.write_text(json.dumps(small_run_config(**sections)), encoding="utf-8")
        return path

    return _write
