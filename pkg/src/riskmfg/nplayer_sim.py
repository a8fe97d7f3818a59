"""N-player experiments driven by a mean-field feedback.

Every replication draws one table of uniforms of shape ``(max N, T + 1)`` from
``SeedSequence([seed, rep])``; player ``i`` always reads row ``i``, so the first
players see the same randomness for every ``N`` of the grid.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence, TypeVar

import numpy as np
from numpy.typing import NDArray
from scipy import stats

from .errors import RejectedInputError, TreeCapError
from .measure_kit import (
    DEFAULT_SUPPORT_CAP,
    AtomMeasure,
    Belief,
    GridMeasure,
    belief_distance,
    emd_small,
    inverse_cdf,
    wasserstein1_1d,
)
from .mfg_solver import ModelSpec, Policy, congestion_eval, price_eval
from .risk import worst_case_expectation

logger = logging.getLogger(__name__)

DEFAULT_ENUMERATION_CAP = 10**5

_T = TypeVar("_T")


def tau(d: int, xi: float) -> float:
    """Empirical-measure convergence exponent in dimension ``d``."""
    if d < 1:
        raise RejectedInputError("dimension must be positive")
    return 0.5 - xi if d <= 2 else 1.0 / d


@dataclass(frozen=True)
class SimConfig:
    n_values: tuple[int, ...] = (16, 64, 256, 1024, 4096)
    reps: int = 200
    seed: int = 0
    xi: float = 0.05
    distance_atoms: int | None = 256
    distance_cap: int = DEFAULT_SUPPORT_CAP
    threads: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "n_values", tuple(int(n) for n in self.n_values))
        if not self.n_values or min(self.n_values) < 1:
            raise RejectedInputError("every N must be at least 1")
        if self.reps < 1:
            raise RejectedInputError("reps must be at least 1")
        if not 0.0 < self.xi < 0.5:
            raise RejectedInputError("xi must lie in (0, 1/2)")
        if self.threads < 1:
            raise RejectedInputError("threads must be at least 1")

    @property
    def max_n(self) -> int:
        return max(self.n_values)

    def rep_rng(self, rep: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, rep]))


@dataclass(frozen=True)
class GapReport:
    """Per-N mean and standard error of a statistic, with a log-log slope fit."""

    statistic: str
    n_values: tuple[int, ...]
    means: tuple[float, ...]
    stderrs: tuple[float, ...]
    reps: int
    slope: float
    intercept: float
    slope_low: float
    slope_high: float

    @classmethod
    def from_samples(cls, statistic: str, n_values: Sequence[int], samples: NDArray[np.float64]) -> GapReport:
        """``samples`` has shape ``(reps, len(n_values))``."""
        reps = samples.shape[0]
        means = samples.mean(axis=0)
        stderrs = samples.std(axis=0, ddof=1) / math.sqrt(reps) if reps > 1 else np.zeros_like(means)
        slope = intercept = low = high = math.nan
        positive = means > 0
        if positive.sum() >= 2:
            fit = stats.linregress(np.log(np.asarray(n_values, dtype=float)[positive]), np.log(means[positive]))
            slope, intercept = float(fit.slope), float(fit.intercept)
            if positive.sum() > 2:
                low, high = slope - 1.96 * fit.stderr, slope + 1.96 * fit.stderr
            else:
                low = high = slope
        return cls(
            statistic,
            tuple(int(n) for n in n_values),
            tuple(float(v) for v in means),
            tuple(float(v) for v in stderrs),
            reps,
            slope,
            intercept,
            float(low),
            float(high),
        )


@dataclass(frozen=True, eq=False)
class ClosedLoop:
    """States ``(N, T + 1)`` and actions ``(N, T)`` of one closed-loop rollout."""

    states: NDArray[np.float64]
    actions: NDArray[np.float64]

    @property
    def players(self) -> int:
        return int(self.states.shape[0])

    def belief(self) -> Belief:
        n = self.players
        joints = tuple(
            AtomMeasure.uniform(np.column_stack([self.states[:, t], self.actions[:, t]]))
            for t in range(self.actions.shape[1])
        )
        return Belief(joints, AtomMeasure.uniform(self.states[:, -1].reshape(n, 1)))


def roll_out(policy: Policy, model: ModelSpec, uniforms: NDArray[np.float64]) -> ClosedLoop:
    """``X_{t+1} = X_t + alpha_t(X_t) + Y_t`` with draws taken from ``uniforms``."""
    T = model.horizon
    if uniforms.ndim != 2 or uniforms.shape[1] != T + 1:
        raise RejectedInputError(f"uniform table must have {T + 1} columns")
    n = uniforms.shape[0]
    states = np.empty((n, T + 1))
    actions = np.empty((n, T))
    states[:, 0] = inverse_cdf(model.initial, uniforms[:, 0])
    for t in range(T):
        actions[:, t] = policy.eval(t, states[:, t])
        states[:, t + 1] = states[:, t] + actions[:, t] + inverse_cdf(model.noises[t], uniforms[:, t + 1])
    return ClosedLoop(states, actions)


def simulate_closed_loop(n_players: int, policy: Policy, model: ModelSpec, seed: int) -> Belief:
    """Empirical belief of ``n_players`` players all using ``policy``."""
    if n_players < 1:
        raise RejectedInputError("need at least one player")
    uniforms = np.random.default_rng(seed).random((n_players, model.horizon + 1))
    return roll_out(policy, model, uniforms).belief()


def delta_ell(path: ClosedLoop, empirical: Belief, reference: Belief, model: ModelSpec) -> NDArray[np.float64]:
    """Per-player running-cost difference between two beliefs along a fixed path.

    ``sum_t A_t (P(t, empirical) - P(t, reference)) + sum_{t<=T} (F(t, X_t, empirical) - F(t, X_t, reference))``
    """
    T = model.horizon
    gap = np.zeros(path.players)
    for t in range(T):
        dp = price_eval(t, empirical, model.price) - price_eval(t, reference, model.price)
        gap += path.actions[:, t] * dp
    for t in range(T + 1):
        x = path.states[:, t]
        gap += congestion_eval(t, x, empirical, model.congestion) - congestion_eval(t, x, reference, model.congestion)
    return gap


def _map_reps(cfg: SimConfig, work: Callable[[int], _T]) -> list[_T]:
    if cfg.threads == 1:
        return [work(rep) for rep in range(cfg.reps)]
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        return list(pool.map(work, range(cfg.reps)))


def belief_gap_experiment(cfg: SimConfig, policy: Policy, model: ModelSpec, reference: Belief) -> GapReport:
    """Mean ``d(b^N, reference)`` over replications for every ``N``."""

    def one_rep(rep: int) -> list[float]:
        table = cfg.rep_rng(rep).random((cfg.max_n, model.horizon + 1))
        out = []
        for n in cfg.n_values:
            b_n = roll_out(policy, model, table[:n]).belief()
            out.append(belief_distance(b_n, reference, cfg.distance_cap, cfg.seed, resample=cfg.distance_atoms))
        return out

    samples = np.array(_map_reps(cfg, one_rep))
    report = GapReport.from_samples("belief_distance", cfg.n_values, samples)
    logger.info("belief gap slope %.4f (expected about %.4f)", report.slope, -tau(1, cfg.xi))
    return report


def deltaell_gap_experiment(cfg: SimConfig, policy: Policy, model: ModelSpec, reference: Belief) -> GapReport:
    """Mean ``|delta_ell|`` over all players and replications for every ``N``."""

    def one_rep(rep: int) -> list[float]:
        table = cfg.rep_rng(rep).random((cfg.max_n, model.horizon + 1))
        out = []
        for n in cfg.n_values:
            path = roll_out(policy, model, table[:n])
            out.append(float(np.mean(np.abs(delta_ell(path, path.belief(), reference, model)))))
        return out

    samples = np.array(_map_reps(cfg, one_rep))
    report = GapReport.from_samples("delta_ell", cfg.n_values, samples)
    logger.info("delta-ell gap slope %.4f (envelope %.4f)", report.slope, -tau(1, cfg.xi) / 2)
    return report


def fournier_guillin_rate(law: GridMeasure, dimension: int, cfg: SimConfig) -> GapReport:
    """Mean W1 between ``N`` i.i.d. draws and the law, for every ``N``.

    In dimension 1 the distance to ``law`` is exact. For ``d >= 2`` the law is
    the product of ``d`` copies of ``law`` and each sample is compared with an
    independent reference sample of the same size.
    """
    if dimension < 1 or dimension > 3:
        raise RejectedInputError("dimension must be 1, 2 or 3")

    def one_rep(rep: int) -> list[float]:
        rng = cfg.rep_rng(rep)
        out = []
        for n in cfg.n_values:
            if dimension == 1:
                draws = inverse_cdf(law, rng.random(n))
                out.append(wasserstein1_1d(AtomMeasure.uniform(draws.reshape(n, 1)), law))
            else:
                draws = inverse_cdf(law, rng.random((n, dimension)))
                ref = inverse_cdf(law, rng.random((n, dimension)))
                out.append(emd_small(AtomMeasure.uniform(draws), AtomMeasure.uniform(ref), cfg.distance_cap))
        return out

    samples = np.array(_map_reps(cfg, one_rep))
    return GapReport.from_samples(f"w1_d{dimension}", cfg.n_values, samples)


# Exact enumeration of tiny games.


@dataclass(frozen=True, eq=False)
class SmallGame:
    """Joint scenario arrays of an ``N``-player game.

    Axis layout: ``N`` initial-state axes, then for each period ``N`` noise axes
    (player order). ``costs[i]`` is player ``i``'s total cost on that grid.
    """

    players: int
    root_weights: NDArray[np.float64]
    noise_weights: tuple[NDArray[np.float64], ...]
    costs: tuple[NDArray[np.float64], ...]


def _empirical_congestion(t: int, x: NDArray[np.float64], everyone: Sequence[NDArray[np.float64]], model: ModelSpec) -> NDArray[np.float64]:
    spec = model.congestion
    n = len(everyone)
    if spec.family == "mean_distance":
        spread = np.abs(x - sum(everyone) / n)
    else:
        spread = sum(np.abs(x - other) for other in everyone) / n
    return spec.eta[t] * spread + spec.theta[t] * x * x + spec.kappa[t]


def _empirical_price(t: int, actions: Sequence[NDArray[np.float64]], model: ModelSpec) -> NDArray[np.float64]:
    spec = model.price
    mean_action = sum(actions) / len(actions)
    return spec.p0[t] + spec.kappa * np.clip(mean_action, -spec.clip, spec.clip)


def enumerate_small_game(
    model: ModelSpec,
    policies: Sequence[Policy],
    reference: Belief | None = None,
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> SmallGame:
    """Total costs on every joint scenario.

    Costs use the empirical belief of the players, or ``reference`` when given.
    """
    n = len(policies)
    if n < 1:
        raise RejectedInputError("need at least one player")
    T = model.horizon
    keep = model.initial.w > 0
    atoms = model.grid.nodes[keep]
    root = model.initial.w[keep] / model.initial.w[keep].sum()
    sizes = [atoms.size] * n + [nz.size for nz in model.noises for _ in range(n)]
    leaves = int(np.prod(sizes, dtype=np.float64))
    if leaves > cap:
        raise TreeCapError(leaves, cap)
    ndim = len(sizes)

    def along(values: NDArray[np.float64], axis: int) -> NDArray[np.float64]:
        shape = [1] * ndim
        shape[axis] = values.size
        return values.reshape(shape)

    states = [along(atoms, i) for i in range(n)]
    costs = [np.zeros([1] * ndim) for _ in range(n)]
    for t in range(T):
        actions = [policies[i].eval(t, states[i]) for i in range(n)]
        price = _empirical_price(t, actions, model) if reference is None else price_eval(t, reference, model.price)
        for i in range(n):
            if reference is None:
                f = _empirical_congestion(t, states[i], states, model)
            else:
                f = congestion_eval(t, states[i], reference, model.congestion)
            costs[i] = costs[i] + 0.5 * actions[i] ** 2 + actions[i] * price + f
        y = model.noises[t].support
        states = [states[i] + actions[i] + along(y, n + t * n + i) for i in range(n)]
    for i in range(n):
        if reference is None:
            f = _empirical_congestion(T, states[i], states, model)
        else:
            f = congestion_eval(T, states[i], reference, model.congestion)
        costs[i] = np.broadcast_to(costs[i] + f, sizes)
    return SmallGame(n, root, tuple(nz.weights for nz in model.noises), tuple(costs))


def _expect_last(values: NDArray[np.float64], weights: NDArray[np.float64]) -> NDArray[np.float64]:
    return values @ weights


def individual_risk(game: SmallGame, player: int, model: ModelSpec, costs: NDArray[np.float64] | None = None) -> float:
    """Nested risk of ``player``: worst case over its own noise, expectation over the others'."""
    n = game.players
    values = game.costs[player] if costs is None else costs
    for t in reversed(range(model.horizon)):
        values = np.moveaxis(values, values.ndim - n + player, -1)
        for _ in range(n - 1):
            values = np.moveaxis(values, -2, -1) @ game.noise_weights[t]
        values, _ = worst_case_expectation(values, model.noises[t], model.ambiguity[t])
    for _ in range(n):
        values = _expect_last(values, game.root_weights)
    return float(values)


def joint_expectation(game: SmallGame, values: NDArray[np.float64]) -> float:
    """Plain expectation of a scenario array over all players' randomness."""
    out = values
    for t in reversed(range(len(game.noise_weights))):
        for _ in range(game.players):
            out = _expect_last(out, game.noise_weights[t])
    for _ in range(game.players):
        out = _expect_last(out, game.root_weights)
    return float(out)


def exact_small_game_eval(
    model: ModelSpec,
    policies: Sequence[Policy],
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> tuple[float, ...]:
    """``J^{i,N}`` of every player, exactly, by full joint enumeration."""
    game = enumerate_small_game(model, policies, cap=cap)
    return tuple(individual_risk(game, i, model) for i in range(game.players))


@dataclass(frozen=True)
class SmallGameGap:
    """Both sides of ``|J^{1,N} - J^1| <= C * E|delta_ell|`` on one tiny game."""

    cost_empirical: float
    cost_reference: float
    mean_abs_delta: float
    density_constant: float

    @property
    def lhs(self) -> float:
        return abs(self.cost_empirical - self.cost_reference)

    @property
    def rhs(self) -> float:
        return self.density_constant * self.mean_abs_delta

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs + 1e-10


def small_game_gap(
    model: ModelSpec,
    policy: Policy,
    reference: Belief,
    players: int = 2,
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> SmallGameGap:
    """Compare player 0's exact risk under the empirical belief and under ``reference``."""
    policies = [policy] * players
    empirical = enumerate_small_game(model, policies, cap=cap)
    frozen = enumerate_small_game(model, policies, reference=reference, cap=cap)
    constant = float(np.prod([amb.density_cap(nz) for amb, nz in zip(model.ambiguity, model.noises)]))
    return SmallGameGap(
        cost_empirical=individual_risk(empirical, 0, model),
        cost_reference=individual_risk(frozen, 0, model),
        mean_abs_delta=joint_expectation(empirical, np.abs(empirical.costs[0] - frozen.costs[0])),
        density_constant=constant,
    )
