"""Piecewise-linear convex functions, their proximal map and Moreau envelope."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Literal, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import isotonic_regression

from .errors import ConvexityError, RejectedInputError
from .measure_kit import Grid1D

logger = logging.getLogger(__name__)

CONVEXITY_TOL = 1e-9
REPAIR_TOL = 1e-6

NormOrder = Literal[1, 2]


@dataclass(frozen=True, eq=False)
class PwlConvex:
    """Convex function given by node values, extended linearly past the grid.

    ``slope_left`` / ``slope_right`` are the slopes of the two linear tails.
    """

    grid: Grid1D
    values: NDArray[np.float64]
    slope_left: float
    slope_right: float

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        if values.shape != (self.grid.n,):
            raise RejectedInputError(f"expected {self.grid.n} node values, got shape {values.shape}")
        if not np.all(np.isfinite(values)) or not (math.isfinite(self.slope_left) and math.isfinite(self.slope_right)):
            raise RejectedInputError("PwlConvex values and slopes must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "slope_left", float(self.slope_left))
        object.__setattr__(self, "slope_right", float(self.slope_right))
        drop = _slope_drop(self.extended_slopes)
        if drop > CONVEXITY_TOL:
            raise ConvexityError(f"slopes decrease by {drop:.3e}; function is not convex")

    @property
    def knots(self) -> NDArray[np.float64]:
        return self.grid.nodes

    @cached_property
    def chord_slopes(self) -> NDArray[np.float64]:
        return np.diff(self.values) / self.grid.h

    @cached_property
    def extended_slopes(self) -> NDArray[np.float64]:
        """Tail and chord slopes in order: node k has subdifferential [s[k], s[k+1]]."""
        return np.concatenate([[self.slope_left], self.chord_slopes, [self.slope_right]])

    def __call__(self, x: ArrayLike) -> NDArray[np.float64]:
        return evaluate(self, x)

    def __add__(self, other: PwlConvex) -> PwlConvex:
        if other.grid != self.grid:
            raise RejectedInputError("cannot add functions sampled on different grids")
        return PwlConvex(
            self.grid,
            self.values + other.values,
            self.slope_left + other.slope_left,
            self.slope_right + other.slope_right,
        )

    def plus_constant(self, c: float) -> PwlConvex:
        return PwlConvex(self.grid, self.values + c, self.slope_left, self.slope_right)

    @classmethod
    def zero(cls, grid: Grid1D) -> PwlConvex:
        return cls(grid, np.zeros(grid.n), 0.0, 0.0)

    @classmethod
    def sample(
        cls,
        grid: Grid1D,
        f: Callable[[NDArray[np.float64]], ArrayLike],
        slopes: tuple[float, float] | None = None,
    ) -> PwlConvex:
        """Sample ``f`` at the nodes; tails default to the end chord slopes."""
        values = np.asarray(f(grid.nodes), dtype=float)
        if slopes is None:
            chords = np.diff(values) / grid.h
            slopes = (float(chords[0]), float(chords[-1]))
        return cls(grid, values, slopes[0], slopes[1])


@dataclass(frozen=True, eq=False)
class PwlKnots:
    """Convex piecewise-linear function on strictly increasing, uneven knots.

    Carries kinks that fall between grid nodes. Tails are linear, as for
    ``PwlConvex``.
    """

    knots: NDArray[np.float64]
    values: NDArray[np.float64]
    slope_left: float
    slope_right: float

    def __post_init__(self) -> None:
        knots = np.array(self.knots, dtype=float).reshape(-1)
        values = np.array(self.values, dtype=float).reshape(-1)
        if knots.shape != values.shape or knots.size < 2:
            raise RejectedInputError("need matching knots and values, at least two of each")
        if not (np.all(np.isfinite(knots)) and np.all(np.isfinite(values))):
            raise RejectedInputError("knots and values must be finite")
        if not (math.isfinite(self.slope_left) and math.isfinite(self.slope_right)):
            raise RejectedInputError("tail slopes must be finite")
        if np.any(np.diff(knots) <= 0):
            raise RejectedInputError("knots must be strictly increasing")
        knots.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "slope_left", float(self.slope_left))
        object.__setattr__(self, "slope_right", float(self.slope_right))
        drop = _slope_drop(self.extended_slopes)
        if drop > CONVEXITY_TOL:
            raise ConvexityError(f"slopes decrease by {drop:.3e}; function is not convex")

    @cached_property
    def chord_slopes(self) -> NDArray[np.float64]:
        return np.diff(self.values) / np.diff(self.knots)

    @cached_property
    def extended_slopes(self) -> NDArray[np.float64]:
        return np.concatenate([[self.slope_left], self.chord_slopes, [self.slope_right]])

    def __call__(self, x: ArrayLike) -> NDArray[np.float64]:
        return evaluate(self, x)


ConvexPwl = Union[PwlConvex, PwlKnots]


def _slope_drop(slopes: NDArray[np.float64]) -> float:
    """Largest relative decrease between consecutive slopes (0 when convex)."""
    if len(slopes) < 2:
        return 0.0
    scale = 1.0 + np.maximum(np.abs(slopes[:-1]), np.abs(slopes[1:]))
    return float(max(0.0, np.max((slopes[:-1] - slopes[1:]) / scale)))


def _repaired(values: NDArray[np.float64], widths: NDArray[np.float64], tol: float) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Values and chord slopes, with round-off slope drops up to ``tol`` projected away."""
    chords = np.diff(values) / widths
    drop = _slope_drop(chords)
    if drop > CONVEXITY_TOL:
        if drop > tol:
            raise ConvexityError(f"sampled function is not convex (slope drop {drop:.3e})")
        logger.debug("repairing convexity round-off of %.3e", drop)
        chords = isotonic_regression(chords, weights=widths).x
        values = values[0] + np.concatenate([[0.0], np.cumsum(chords * widths)])
    return values, chords


def repair_convexity(
    grid: Grid1D,
    values: ArrayLike,
    slope_left: float,
    slope_right: float,
    tol: float = REPAIR_TOL,
) -> PwlConvex:
    """Build a ``PwlConvex`` from internally computed samples.

    Round-off violations up to ``tol`` are removed by isotonic projection of the
    chord slopes; anything larger is a real modeling error.
    """
    values, chords = _repaired(np.asarray(values, dtype=float), np.full(grid.n - 1, grid.h), tol)
    return PwlConvex(grid, values, min(slope_left, chords[0]), max(slope_right, chords[-1]))


def repair_knots(
    knots: ArrayLike,
    values: ArrayLike,
    slope_left: float,
    slope_right: float,
    tol: float = REPAIR_TOL,
) -> PwlKnots:
    """``repair_convexity`` for uneven knots; slopes are pooled by interval length."""
    knots = np.asarray(knots, dtype=float)
    values, chords = _repaired(np.asarray(values, dtype=float), np.diff(knots), tol)
    return PwlKnots(knots, values, min(slope_left, chords[0]), max(slope_right, chords[-1]))


def evaluate(u: ConvexPwl, x: ArrayLike) -> NDArray[np.float64]:
    """Linear interpolation between knots, linear tails outside."""
    x = np.asarray(x, dtype=float)
    knots = u.knots
    inside = np.interp(x, knots, u.values)
    left = u.values[0] + u.slope_left * (x - knots[0])
    right = u.values[-1] + u.slope_right * (x - knots[-1])
    return np.where(x < knots[0], left, np.where(x > knots[-1], right, inside))


def prox(u: ConvexPwl, x: ArrayLike) -> NDArray[np.float64]:
    """Exact minimizer of ``0.5 |x - y|^2 + u(y)``.

    Solves ``x in y + du(y)``: the intervals ``[x_k + s_k, x_k + s_{k+1}]`` map to
    knot ``x_k`` and the gaps between them are segments (or tails) where
    ``y = x - slope``.
    """
    x = np.asarray(x, dtype=float)
    nodes = u.knots
    slopes = u.extended_slopes
    n = len(nodes)
    lower = nodes + slopes[:-1]
    upper = nodes + slopes[1:]
    k = np.searchsorted(upper, x, side="left")
    node = np.minimum(k, n - 1)
    at_node = (k < n) & (x >= lower[node])
    return np.where(at_node, nodes[node], x - slopes[k])


def moreau(u: ConvexPwl, x: ArrayLike) -> NDArray[np.float64]:
    """Moreau envelope ``min_y 0.5 |x - y|^2 + u(y)``."""
    x = np.asarray(x, dtype=float)
    y = prox(u, x)
    return 0.5 * (x - y) ** 2 + evaluate(u, y)


def moreau_curve(u: ConvexPwl, grid: Grid1D, shift: float = 0.0) -> PwlConvex:
    """Sample ``x -> moreau(u, x - shift)`` on ``grid``.

    The tail slopes are the envelope gradients ``z - prox(u, z)`` at the two
    window ends.
    """
    z = grid.nodes - shift
    y = prox(u, z)
    values = 0.5 * (z - y) ** 2 + evaluate(u, y)
    return repair_convexity(grid, values, float(z[0] - y[0]), float(z[-1] - y[-1]))


def gnorm(values: ArrayLike, nodes: ArrayLike, p: NormOrder) -> float:
    """Grid sup of ``|f(x)| / (1 + |x|^p)``."""
    if p not in (1, 2):
        raise RejectedInputError(f"weight exponent must be 1 or 2, got {p}")
    f = np.asarray(values, dtype=float)
    x = np.asarray(nodes, dtype=float)
    return float(np.max(np.abs(f) / (1.0 + np.abs(x) ** p)))


@dataclass(frozen=True)
class GNorm:
    """Weighted sup norm ``sup |f(x)| / (1 + |x|^p)`` evaluated on a grid."""

    p: NormOrder

    def __post_init__(self) -> None:
        if self.p not in (1, 2):
            raise RejectedInputError(f"weight exponent must be 1 or 2, got {self.p}")

    def __call__(self, values: ArrayLike, nodes: ArrayLike) -> float:
        return gnorm(values, nodes, self.p)


def _ray_candidates(a: float, b: float, start: float, direction: int, p: NormOrder) -> list[float]:
    """Points where ``(a + b x) / (1 + |x|^p)`` can peak on ``start + direction * [0, inf)``."""
    candidates = [start]
    if (0.0 - start) * direction > 0:
        candidates.append(0.0)
    if p == 2 and b != 0.0:
        root = math.hypot(a, b)
        candidates += [(-a + root) / b, (-a - root) / b]
    return [c for c in candidates if (c - start) * direction >= 0]


def _ray_sup(a: float, b: float, start: float, direction: int, p: NormOrder, absolute: bool) -> tuple[float, float]:
    """Sup and location of the (absolute or signed) weighted ratio along a tail ray."""
    best, where = -math.inf, start
    for c in _ray_candidates(a, b, start, direction, p):
        value = a + b * c
        ratio = (abs(value) if absolute else value) / (1.0 + abs(c) ** p)
        if ratio > best:
            best, where = ratio, c
    if p == 1:
        limit = abs(b) if absolute else b * direction
        if limit > best:
            best, where = limit, direction * math.inf
    return best, where


def _tails(u_values: NDArray[np.float64], slope_left: float, slope_right: float, grid: Grid1D) -> list[tuple[float, float, float, int]]:
    """``(a, b, start, direction)`` of the two linear tails ``a + b x``."""
    left_a = u_values[0] - slope_left * grid.x_min
    right_a = u_values[-1] - slope_right * grid.x_max
    return [(left_a, slope_left, grid.x_min, -1), (right_a, slope_right, grid.x_max, 1)]


def gnorm_diff(u: PwlConvex, v: PwlConvex, p: NormOrder) -> float:
    """``||u - v||_{G,p}`` over the whole line: grid nodes plus both linear tails."""
    if u.grid != v.grid:
        raise RejectedInputError("functions live on different grids")
    diff = u.values - v.values
    best = gnorm(diff, u.grid.nodes, p)
    for a, b, start, direction in _tails(diff, u.slope_left - v.slope_left, u.slope_right - v.slope_right, u.grid):
        best = max(best, _ray_sup(a, b, start, direction, p, absolute=True)[0])
    return best


@dataclass(frozen=True)
class QClassReport:
    ok: bool
    constant: float
    witness: float | None = None
    reason: str = ""


def q_class_constant(u: PwlConvex, p: NormOrder) -> tuple[float, float]:
    """Smallest ``C`` with ``-C <= u <= C (1 + |x|^p)`` on the whole line, and where it binds."""
    nodes = u.grid.nodes
    if u.slope_left > 0:
        return math.inf, -math.inf
    if u.slope_right < 0:
        return math.inf, math.inf
    lower_at = int(np.argmin(u.values))
    best, where = float(-u.values[lower_at]), float(nodes[lower_at])
    ratios = u.values / (1.0 + np.abs(nodes) ** p)
    upper_at = int(np.argmax(ratios))
    if ratios[upper_at] > best:
        best, where = float(ratios[upper_at]), float(nodes[upper_at])
    for a, b, start, direction in _tails(u.values, u.slope_left, u.slope_right, u.grid):
        ratio, at = _ray_sup(a, b, start, direction, p, absolute=False)
        if ratio > best:
            best, where = ratio, at
    return best, where


def q_class_check(u: PwlConvex, c: float, p: NormOrder, tol: float = CONVEXITY_TOL) -> QClassReport:
    """Membership test for ``Q_p^C`` with a witness on failure."""
    if p not in (1, 2):
        raise RejectedInputError(f"weight exponent must be 1 or 2, got {p}")
    nodes = u.grid.nodes
    slack = tol * (1.0 + c)
    below = np.flatnonzero(u.values < -c - slack)
    if below.size:
        return QClassReport(False, c, float(nodes[below[0]]), "lower bound -C violated")
    above = np.flatnonzero(u.values > c * (1.0 + np.abs(nodes) ** p) + slack)
    if above.size:
        return QClassReport(False, c, float(nodes[above[0]]), "upper bound C(1+|x|^p) violated")
    constant, where = q_class_constant(u, p)
    if constant > c + slack:
        return QClassReport(False, c, where, "tail leaves the class")
    return QClassReport(True, c)


def prox_growth_bound(r: float) -> float:
    """``|prox_u(x)|^2 <= C1 (1 + |x|^2)`` for ``u`` in ``Q_2^r``."""
    return 8.0 * r + 2.0


def envelope_class_bound(r: float) -> float:
    return (r + 1.0) * (1.0 + prox_growth_bound(r))


def prox_holder_bound(r: float) -> float:
    return math.sqrt(2.0 * (1.0 + prox_growth_bound(r)))


def envelope_lipschitz_bound(r: float) -> float:
    return 1.0 + prox_growth_bound(r)


def envelope_modulus_bound(r: float) -> float:
    return 1.0 + math.sqrt(prox_growth_bound(r))
