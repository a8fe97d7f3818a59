"""Run configuration for riskmfg."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError, RiskMfgError
from .measure_kit import DEFAULT_CLAMP_THRESHOLD, DEFAULT_SUPPORT_CAP, Grid1D, GridMeasure
from .mfg_solver import CongestionSpec, ModelSpec, PriceSpec
from .nplayer_sim import SimConfig
from .risk import AmbiguitySet, DiscreteNoise, quantize_law

PerPeriod = Union[float, list[float]]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridConfig(StrictModel):
    x_min: float = -6.0
    x_max: float = 6.0
    n: int = Field(401, ge=2)

    @model_validator(mode="after")
    def _ordered(self) -> GridConfig:
        if self.x_min >= self.x_max:
            raise ValueError("x_min must be below x_max")
        return self

    def build(self) -> Grid1D:
        return Grid1D(self.x_min, self.x_max, self.n)


class LawConfig(StrictModel):
    """A law on the grid: named family or explicit node weights."""

    kind: Literal["gaussian", "uniform", "delta", "weights"] = "gaussian"
    mean: float = 0.0
    std: float = Field(1.0, gt=0)
    low: float | None = None
    high: float | None = None
    at: float = 0.0
    weights: list[float] | None = None

    @model_validator(mode="after")
    def _weights_present(self) -> LawConfig:
        if self.kind == "weights" and not self.weights:
            raise ValueError("kind 'weights' needs a weights list")
        return self

    def build(self, grid: Grid1D) -> GridMeasure:
        if self.kind == "gaussian":
            return GridMeasure.gaussian(grid, self.mean, self.std)
        if self.kind == "uniform":
            return GridMeasure.uniform(grid, self.low, self.high)
        if self.kind == "delta":
            return GridMeasure.dirac(grid, self.at)
        return GridMeasure.from_density(grid, self.weights or [])


class NoiseAtom(StrictModel):
    y: float
    w: float = Field(gt=0)


class NoiseConfig(StrictModel):
    """Explicit atoms, or a continuous law quantized to ``k`` atoms."""

    atoms: list[NoiseAtom] | None = None
    law: Literal["gaussian", "uniform"] | None = None
    k: int = Field(3, ge=1)
    loc: float = 0.0
    scale: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _one_source(self) -> NoiseConfig:
        if (self.atoms is None) == (self.law is None):
            raise ValueError("give exactly one of 'atoms' or 'law'")
        if self.atoms is not None and not self.atoms:
            raise ValueError("noise needs at least one atom")
        return self

    def build(self) -> DiscreteNoise:
        if self.law is not None:
            return quantize_law(self.law, self.k, self.loc, self.scale)
        total = sum(a.w for a in self.atoms or [])
        return DiscreteNoise.from_atoms([(a.y, a.w / total) for a in self.atoms or []])


class AmbiguityConfig(StrictModel):
    kind: Literal["risk_neutral", "cvar", "box"] = "risk_neutral"
    alpha: float = Field(1.0, gt=0, le=1)
    floors: list[float] = Field(default_factory=list)
    caps: list[float] = Field(default_factory=list)

    def build(self) -> AmbiguitySet:
        if self.kind == "cvar":
            return AmbiguitySet.cvar(self.alpha)
        if self.kind == "box":
            return AmbiguitySet.box(self.floors, self.caps)
        return AmbiguitySet.risk_neutral()


class CongestionConfig(StrictModel):
    family: Literal["mean_distance", "crowd"] = "mean_distance"
    eta: PerPeriod = 0.0
    theta: PerPeriod = 0.0
    kappa: PerPeriod = 0.0


class PriceConfig(StrictModel):
    p0: PerPeriod = 0.0
    kappa: float = 0.0
    clip: float = Field(1.0, ge=0)


def _broadcast(value: object, count: int, name: str) -> list:
    items = value if isinstance(value, list) else [value] * count
    if len(items) != count:
        raise ValueError(f"{name} needs {count} entries, got {len(items)}")
    return items


class ModelConfig(StrictModel):
    horizon: int = Field(4, ge=1)
    grid: GridConfig = Field(default_factory=GridConfig)
    initial: LawConfig = Field(default_factory=LawConfig)
    noise: Union[NoiseConfig, list[NoiseConfig]] = Field(
        default_factory=lambda: NoiseConfig(law="gaussian", k=3, scale=0.5)
    )
    ambiguity: Union[AmbiguityConfig, list[AmbiguityConfig]] = Field(default_factory=AmbiguityConfig)
    congestion: CongestionConfig = Field(default_factory=CongestionConfig)
    price: PriceConfig = Field(default_factory=PriceConfig)
    moment_cap: float = Field(10.0, gt=0)
    belief_cap: float | None = Field(None, gt=0)
    clamp_threshold: float = Field(DEFAULT_CLAMP_THRESHOLD, ge=0)

    @model_validator(mode="after")
    def _period_lengths(self) -> ModelConfig:
        T = self.horizon
        _broadcast(self.noise, T, "noise")
        _broadcast(self.ambiguity, T, "ambiguity")
        for name in ("eta", "theta", "kappa"):
            _broadcast(getattr(self.congestion, name), T + 1, f"congestion.{name}")
        _broadcast(self.price.p0, T, "price.p0")
        return self

    def build(self) -> ModelSpec:
        """Translate into solver types; domain errors become ``ConfigError``."""
        T = self.horizon
        try:
            grid = self.grid.build()
            return ModelSpec(
                horizon=T,
                grid=grid,
                initial=self.initial.build(grid),
                noises=tuple(n.build() for n in _broadcast(self.noise, T, "noise")),
                ambiguity=tuple(a.build() for a in _broadcast(self.ambiguity, T, "ambiguity")),
                congestion=CongestionSpec.build(
                    T, self.congestion.family, self.congestion.eta, self.congestion.theta, self.congestion.kappa
                ),
                price=PriceSpec.build(T, self.price.p0, self.price.kappa, self.price.clip),
                moment_cap=self.moment_cap,
                belief_cap=self.belief_cap,
                clamp_threshold=self.clamp_threshold,
            )
        except RiskMfgError as exc:
            raise ConfigError(f"invalid model: {exc}") from exc


class SolverConfig(StrictModel):
    damping: float = Field(0.5, ge=0, le=1)
    tol: float = Field(1e-3, gt=0)
    max_iter: int = Field(200, ge=0)
    distance_cap: int = Field(DEFAULT_SUPPORT_CAP, ge=2)
    distance_seed: int = 0


class SimulationConfig(StrictModel):
    n_values: list[int] = Field(default_factory=lambda: [16, 64, 256, 1024, 4096])
    reps: int = Field(200, ge=1)
    seed: int = 0
    xi: float = Field(0.05, gt=0, lt=0.5)
    distance_atoms: int | None = Field(256, ge=1)

    @model_validator(mode="after")
    def _positive_n(self) -> SimulationConfig:
        if not self.n_values or min(self.n_values) < 1:
            raise ValueError("n_values must be a nonempty list of positive integers")
        return self

    def build(self, threads: int = 1, distance_cap: int = DEFAULT_SUPPORT_CAP) -> SimConfig:
        return SimConfig(
            n_values=tuple(self.n_values),
            reps=self.reps,
            seed=self.seed,
            xi=self.xi,
            distance_atoms=self.distance_atoms,
            distance_cap=distance_cap,
            threads=threads,
        )


class OracleConfig(StrictModel):
    tree_cap: int = Field(10**6, ge=1)
    perturbations: int = Field(50, ge=0)
    perturbation_scale: float = Field(0.1, ge=0)
    tolerance: float = Field(5e-3, gt=0)
    seed: int = 0


class RatesConfig(StrictModel):
    law: LawConfig = Field(default_factory=lambda: LawConfig(kind="uniform"))
    grid: GridConfig = Field(default_factory=lambda: GridConfig(x_min=0.0, x_max=1.0, n=1001))
    dimension: int = Field(1, ge=1, le=3)
    n_values: list[int] = Field(default_factory=lambda: [16, 64, 256, 1024, 4096])
    reps: int = Field(200, ge=1)
    seed: int = 0


class RunConfig(StrictModel):
    """Root of the JSON run configuration."""

    version: Literal[1] = 1
    model: ModelConfig = Field(default_factory=ModelConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    oracle: OracleConfig = Field(default_factory=OracleConfig)
    rates: RatesConfig = Field(default_factory=RatesConfig)
    output_dir: str = "runs/default"

    def seeds(self) -> dict[str, int]:
        return {
            "distance": self.solver.distance_seed,
            "simulation": self.simulation.seed,
            "oracle": self.oracle.seed,
            "rates": self.rates.seed,
        }

    def with_seed(self, seed: int) -> RunConfig:
        """Copy with every seed replaced by ``seed``."""
        return self.model_copy(
            update={
                "solver": self.solver.model_copy(update={"distance_seed": seed}),
                "simulation": self.simulation.model_copy(update={"seed": seed}),
                "oracle": self.oracle.model_copy(update={"seed": seed}),
                "rates": self.rates.model_copy(update={"seed": seed}),
            }
        )


class RuntimeSettings(BaseSettings):
    """Process-level settings from ``RISKMFG_*`` environment variables."""

    model_config = SettingsConfigDict(env_prefix="RISKMFG_")

    threads: int = Field(1, ge=1)
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"
    output_root: Path | None = None


class ConfigManager:
    """Loads, saves and fingerprints run configurations."""

    def __init__(self) -> None:
        self._config: RunConfig | None = None
        self._config_path: Path | None = None

    @property
    def config_path(self) -> Path | None:
        return self._config_path

    def load_config(self, path: str | Path) -> RunConfig:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
        try:
            config = RunConfig.model_validate(data)
        except ValidationError as exc:
            raise ConfigError(f"{path} failed schema validation:\n{exc}") from exc
        self._config = config
        self._config_path = path
        return config

    def save_config(self, config: RunConfig, path: str | Path | None = None) -> Path:
        target = Path(path) if path is not None else self._config_path
        if target is None:
            raise ConfigError("no path to save the configuration to")
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(config.model_dump(mode="json"), indent=2) + "\n", encoding="utf-8")
        self._config = config
        self._config_path = target
        return target

    def get_config(self) -> RunConfig:
        if self._config is None:
            raise ConfigError("no configuration loaded")
        return self._config

    @staticmethod
    def config_hash(config: RunConfig) -> str:
        canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @staticmethod
    def load_settings() -> RuntimeSettings:
        try:
            return RuntimeSettings()
        except ValidationError as exc:
            raise ConfigError(f"invalid RISKMFG_* environment:\n{exc}") from exc


config_manager = ConfigManager()
