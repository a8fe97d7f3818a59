"""Ambiguity sets, one-step risk mappings and composite risk on scenario trees."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Literal, Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss
from numpy.typing import ArrayLike, NDArray

from .convex_tools import PwlConvex, PwlKnots, repair_convexity, repair_knots
from .errors import AmbiguityError, RejectedInputError
from .measure_kit import MASS_TOL, Grid1D, moment

logger = logging.getLogger(__name__)

AmbiguityKind = Literal["risk_neutral", "cvar", "box"]

# knots closer than this many grid spacings are merged
KNOT_SPACING = 1e-6


@dataclass(frozen=True, eq=False)
class DiscreteNoise:
    """Finitely supported noise law with strictly positive atom weights."""

    support: NDArray[np.float64]
    weights: NDArray[np.float64]

    def __post_init__(self) -> None:
        support = np.array(self.support, dtype=float).reshape(-1)
        weights = np.array(self.weights, dtype=float).reshape(-1)
        if support.shape != weights.shape or support.size == 0:
            raise RejectedInputError("noise needs one positive weight per atom")
        if not (np.all(np.isfinite(support)) and np.all(np.isfinite(weights))):
            raise RejectedInputError("noise atoms and weights must be finite")
        if np.any(weights <= 0):
            raise RejectedInputError("noise weights must be strictly positive")
        if abs(weights.sum() - 1.0) > MASS_TOL:
            raise RejectedInputError(f"noise weights sum to {weights.sum()!r}, expected 1")
        support.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "weights", weights)

    @property
    def size(self) -> int:
        return int(self.support.size)

    def second_moment(self) -> float:
        return moment(self, 2.0)

    @classmethod
    def dirac(cls, y: float = 0.0) -> DiscreteNoise:
        return cls(np.array([y]), np.array([1.0]))

    @classmethod
    def from_atoms(cls, atoms: Sequence[tuple[float, float]]) -> DiscreteNoise:
        ys, ws = zip(*atoms)
        return cls(np.array(ys), np.array(ws))


@dataclass(frozen=True)
class AmbiguitySet:
    """Admissible densities ``Z`` against a discrete noise: ``floors <= Z <= caps``, ``E[Z] = 1``.

    ``cvar`` with ``alpha = 1`` is normalized to ``risk_neutral``.
    """

    kind: AmbiguityKind = "risk_neutral"
    alpha: float = 1.0
    floors: tuple[float, ...] = ()
    caps: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind == "cvar":
            if not 0.0 < self.alpha <= 1.0:
                raise AmbiguityError(f"CVaR level must lie in (0, 1], got {self.alpha}")
            if self.alpha == 1.0:
                object.__setattr__(self, "kind", "risk_neutral")
        elif self.kind == "box":
            floors = tuple(float(v) for v in self.floors)
            caps = tuple(float(v) for v in self.caps)
            if len(floors) != len(caps) or not floors:
                raise AmbiguityError("box bounds need one floor and one cap per atom")
            for j, (lo, hi) in enumerate(zip(floors, caps)):
                if lo < 0 or lo > hi or not math.isfinite(hi):
                    raise AmbiguityError(f"box bounds at atom {j} are invalid: [{lo}, {hi}]")
            object.__setattr__(self, "floors", floors)
            object.__setattr__(self, "caps", caps)
        elif self.kind != "risk_neutral":
            raise AmbiguityError(f"unknown ambiguity kind {self.kind!r}")

    @classmethod
    def risk_neutral(cls) -> AmbiguitySet:
        return cls("risk_neutral")

    @classmethod
    def cvar(cls, alpha: float) -> AmbiguitySet:
        return cls("cvar", alpha=alpha)

    @classmethod
    def box(cls, floors: Sequence[float], caps: Sequence[float]) -> AmbiguitySet:
        return cls("box", floors=tuple(floors), caps=tuple(caps))

    def bounds(self, noise: DiscreteNoise) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Per-atom density floors and caps; raises if the polytope is empty."""
        k = noise.size
        if self.kind == "risk_neutral":
            return np.ones(k), np.ones(k)
        if self.kind == "cvar":
            return np.zeros(k), np.full(k, 1.0 / self.alpha)
        if len(self.floors) != k:
            raise AmbiguityError(f"box has {len(self.floors)} bounds but the noise has {k} atoms")
        floors, caps = np.array(self.floors), np.array(self.caps)
        low, high = float(noise.weights @ floors), float(noise.weights @ caps)
        if low > 1.0 + MASS_TOL or high < 1.0 - MASS_TOL:
            raise AmbiguityError(f"no density fits the box: E[floor]={low:.6g}, E[cap]={high:.6g}")
        return floors, caps

    def density_cap(self, noise: DiscreteNoise) -> float:
        return float(np.max(self.bounds(noise)[1]))


def worst_case_expectation(
    values: ArrayLike, noise: DiscreteNoise, amb: AmbiguitySet
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """``sup_Z E[Z v]`` over the ambiguity set, along the last axis of ``values``.

    Starts every atom at its floor, then spends the remaining probability budget
    on the largest values first, up to each cap. Returns the value(s) and the
    attaining density.
    """
    v = np.asarray(values, dtype=float)
    if v.shape[-1] != noise.size:
        raise RejectedInputError(f"expected {noise.size} values per scenario, got {v.shape[-1]}")
    if not np.all(np.isfinite(v)):
        raise RejectedInputError("worst-case expectation of non-finite values")
    w = noise.weights
    if amb.kind == "risk_neutral":
        return v @ w, np.ones_like(v)

    floors, caps = amb.bounds(noise)
    base = w * floors
    budget = 1.0 - base.sum()
    room = np.broadcast_to(w * (caps - floors), v.shape)
    order = np.argsort(-v, axis=-1, kind="stable")
    room_sorted = np.take_along_axis(room, order, axis=-1)
    spent_before = np.cumsum(room_sorted, axis=-1) - room_sorted
    fill_sorted = np.clip(budget - spent_before, 0.0, room_sorted)
    fill = np.empty_like(fill_sorted)
    np.put_along_axis(fill, order, fill_sorted, axis=-1)
    mass = base + fill
    return np.sum(mass * v, axis=-1), mass / w


def upsilon(u: PwlConvex, noise: DiscreteNoise, amb: AmbiguitySet, grid: Grid1D | None = None) -> PwlConvex:
    """``x -> sup_xi E_xi[u(x + Y)]`` sampled on ``grid`` (default: the grid of ``u``)."""
    grid = u.grid if grid is None else grid
    shifted = u(grid.nodes[:, None] + noise.support[None, :])
    values, _ = worst_case_expectation(shifted, noise, amb)
    return repair_convexity(grid, values, u.slope_left, u.slope_right)


def _crossings(x: NDArray[np.float64], shifted: NDArray[np.float64]) -> NDArray[np.float64]:
    """Points between consecutive ``x`` where two columns of ``shifted`` swap order."""
    roots = []
    for a, b in combinations(range(shifted.shape[1]), 2):
        d = shifted[:, a] - shifted[:, b]
        flip = np.flatnonzero(d[:-1] * d[1:] < 0)
        if flip.size:
            frac = d[flip] / (d[flip] - d[flip + 1])
            roots.append(x[flip] + frac * (x[flip + 1] - x[flip]))
    return np.concatenate(roots) if roots else np.empty(0)


def _merge_knots(points: NDArray[np.float64], spacing: float) -> NDArray[np.float64]:
    ordered = np.unique(points)
    return ordered[np.concatenate([[True], np.diff(ordered) > spacing])]


def upsilon_knots(
    f: Callable[[NDArray[np.float64]], NDArray[np.float64]],
    noise: DiscreteNoise,
    amb: AmbiguitySet,
    grid: Grid1D,
    kinks: ArrayLike = (),
) -> PwlKnots:
    """``x -> sup_xi E_xi[f(x + Y)]`` for a convex ``f`` known at every point.

    Exact at its knots: the grid nodes, the ``kinks`` of ``f`` moved back by each
    noise atom, and the points where two shifted copies of ``f`` cross. The
    worst-case density switches at those crossings, so ``upsilon`` bends there
    even when ``f`` is smooth. Tails take the end chord slopes.
    """
    y = noise.support
    moved = (np.asarray(kinks, dtype=float).reshape(-1, 1) - y[None, :]).reshape(-1)
    moved = moved[(moved > grid.x_min) & (moved < grid.x_max)]
    base = np.union1d(grid.nodes, moved)
    candidates = [base]
    if amb.kind != "risk_neutral":
        candidates.append(_crossings(base, f(base[:, None] + y[None, :])))
    knots = _merge_knots(np.concatenate(candidates), KNOT_SPACING * grid.h)
    values, _ = worst_case_expectation(f(knots[:, None] + y[None, :]), noise, amb)
    chords = np.diff(values) / np.diff(knots)
    return repair_knots(knots, values, float(chords[0]), float(chords[-1]))


def upsilon_lipschitz_bound(r: float) -> float:
    """Modulus of ``upsilon`` in the ``G_2`` norm on ``Q_2^r``."""
    return 2.0 * (1.0 + r)


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    """Complete scenario tree with an initial-state layer.

    ``leaf_costs`` has shape ``(n_root, K_0, ..., K_{T-1})``: the first axis runs
    over initial atoms weighted by ``root_weights``, axis ``t + 1`` over the atoms
    of ``noises[t]``.
    """

    root_weights: NDArray[np.float64]
    noises: tuple[DiscreteNoise, ...]
    leaf_costs: NDArray[np.float64]

    def __post_init__(self) -> None:
        root = np.array(self.root_weights, dtype=float).reshape(-1)
        costs = np.array(self.leaf_costs, dtype=float)
        noises = tuple(self.noises)
        expected = (root.size, *(nz.size for nz in noises))
        if costs.shape != expected:
            raise RejectedInputError(f"leaf costs have shape {costs.shape}, tree needs {expected}")
        if np.any(root < 0) or abs(root.sum() - 1.0) > MASS_TOL:
            raise RejectedInputError("root weights must form a probability vector")
        object.__setattr__(self, "root_weights", root)
        object.__setattr__(self, "noises", noises)
        object.__setattr__(self, "leaf_costs", costs)

    @property
    def depth(self) -> int:
        return len(self.noises)

    def with_costs(self, leaf_costs: ArrayLike) -> ScenarioTree:
        return ScenarioTree(self.root_weights, self.noises, np.asarray(leaf_costs, dtype=float))


def composite_risk_tree(tree: ScenarioTree, ambs: Sequence[AmbiguitySet]) -> float:
    """Nested worst-case recursion from the leaves, plain expectation at the root."""
    if len(ambs) != tree.depth:
        raise RejectedInputError(f"need {tree.depth} ambiguity sets, got {len(ambs)}")
    values = tree.leaf_costs
    for t in reversed(range(tree.depth)):
        values, _ = worst_case_expectation(values, tree.noises[t], ambs[t])
    return float(values @ tree.root_weights)


@dataclass
class AmbiguityDiagnostics:
    ok: bool = True
    failures: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    witness: int | None = None

    def fail(self, message: str, witness: int | None = None) -> None:
        self.ok = False
        self.failures.append(message)
        if self.witness is None:
            self.witness = witness


def validate_ambiguity(amb: AmbiguitySet, noise: DiscreteNoise, c: float) -> AmbiguityDiagnostics:
    """Check the density cap, floor and second-moment conditions against constant ``c``."""
    report = AmbiguityDiagnostics()
    try:
        floors, caps = amb.bounds(noise)
    except AmbiguityError as exc:
        report.fail(str(exc))
        return report

    over = np.flatnonzero(caps > c * (1.0 + 1e-12))
    if over.size:
        report.fail(f"density cap {caps[over[0]]:.6g} exceeds C={c:.6g}", int(over[0]))
    under = np.flatnonzero(floors < 1.0 / c * (1.0 - 1e-12))
    if under.size:
        # zero floors are the norm for CVaR; only the two-sided norm bound needs them
        report.warnings.append(f"density floor {floors[under[0]]:.6g} below 1/C={1.0 / c:.6g}")

    worst_moment, _ = worst_case_expectation(noise.support**2, noise, amb)
    limit = c * noise.second_moment()
    if float(worst_moment) > limit + 1e-12:
        report.fail(f"worst-case second moment {float(worst_moment):.6g} exceeds C*E[Y^2]={limit:.6g}")
    for message in report.warnings:
        logger.warning(message)
    return report


def quantize_law(name: Literal["gaussian", "uniform"], k: int, loc: float = 0.0, scale: float = 1.0) -> DiscreteNoise:
    """``k``-atom Gauss quadrature of a continuous law.

    ``gaussian`` uses Hermite nodes (mean ``loc``, std ``scale``); ``uniform`` uses
    Legendre nodes on ``[loc - scale, loc + scale]``. Both match the first
    ``2k - 1`` moments.
    """
    if k < 1:
        raise RejectedInputError("quantization needs at least one atom")
    if scale <= 0:
        raise RejectedInputError("scale must be positive")
    if name == "gaussian":
        nodes, weights = hermegauss(k)
    elif name == "uniform":
        nodes, weights = leggauss(k)
    else:
        raise RejectedInputError(f"unknown law {name!r}")
    weights = weights / weights.sum()
    return DiscreteNoise(loc + scale * nodes, weights)
