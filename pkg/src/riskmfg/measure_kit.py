"""Discrete probability measures for riskmfg.

Measures live either on a fixed uniform 1-D grid (``GridMeasure``) or as
weighted atom clouds in dimension 1 to 3 (``AtomMeasure``). Everything here is
immutable: operations return new measures and never touch their inputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Protocol, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog
from scipy.spatial.distance import cdist

from .errors import GridTooSmallError, RejectedInputError, SupportCapError

logger = logging.getLogger(__name__)

MASS_TOL = 1e-12
DEFAULT_CLAMP_THRESHOLD = 1e-6
DEFAULT_SUPPORT_CAP = 512
_SNAP_TOL = 1e-11


class LineMeasure(Protocol):
    """Anything exposing a 1-D support and matching weights."""

    @property
    def support(self) -> NDArray[np.float64]: ...

    @property
    def weights(self) -> NDArray[np.float64]: ...


@dataclass(frozen=True)
class Grid1D:
    """Uniform grid with ``n`` nodes on ``[x_min, x_max]``."""

    x_min: float
    x_max: float
    n: int

    def __post_init__(self) -> None:
        if not (np.isfinite(self.x_min) and np.isfinite(self.x_max)):
            raise RejectedInputError("grid bounds must be finite")
        if self.x_min >= self.x_max:
            raise RejectedInputError(f"x_min={self.x_min} must be below x_max={self.x_max}")
        if int(self.n) != self.n or self.n < 2:
            raise RejectedInputError(f"grid needs at least 2 nodes, got {self.n}")

    @property
    def h(self) -> float:
        return (self.x_max - self.x_min) / (self.n - 1)

    @cached_property
    def nodes(self) -> NDArray[np.float64]:
        nodes = np.linspace(self.x_min, self.x_max, int(self.n))
        nodes.setflags(write=False)
        return nodes

    def refine(self, factor: int = 2) -> Grid1D:
        """Same window, spacing divided by ``factor``."""
        return Grid1D(self.x_min, self.x_max, (self.n - 1) * factor + 1)


def _frozen(values: ArrayLike) -> NDArray[np.float64]:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


def _check_weights(weights: NDArray[np.float64], what: str) -> None:
    if not np.all(np.isfinite(weights)):
        raise RejectedInputError(f"{what}: weights must be finite")
    if np.any(weights < 0):
        raise RejectedInputError(f"{what}: weights must be nonnegative")
    total = float(weights.sum())
    if abs(total - 1.0) > MASS_TOL:
        raise RejectedInputError(f"{what}: weights sum to {total!r}, expected 1")


@dataclass(frozen=True, eq=False)
class GridMeasure:
    """Probability weights attached to the nodes of a ``Grid1D``."""

    grid: Grid1D
    w: NDArray[np.float64]

    def __post_init__(self) -> None:
        w = _frozen(self.w)
        if w.shape != (self.grid.n,):
            raise RejectedInputError(f"expected {self.grid.n} node weights, got shape {w.shape}")
        _check_weights(w, "GridMeasure")
        object.__setattr__(self, "w", w)

    @property
    def support(self) -> NDArray[np.float64]:
        return self.grid.nodes

    @property
    def weights(self) -> NDArray[np.float64]:
        return self.w

    def mean(self) -> float:
        return float(np.sum(self.w * self.grid.nodes))

    @classmethod
    def from_density(cls, grid: Grid1D, density: ArrayLike) -> GridMeasure:
        """Normalize nonnegative node values into a probability vector."""
        values = np.asarray(density, dtype=float)
        if values.shape != (grid.n,) or np.any(values < 0) or not np.all(np.isfinite(values)):
            raise RejectedInputError("density must be finite, nonnegative and node-sampled")
        total = values.sum()
        if total <= 0:
            raise RejectedInputError("density has zero mass on the grid")
        return cls(grid, values / total)

    @classmethod
    def gaussian(cls, grid: Grid1D, mean: float, std: float) -> GridMeasure:
        if std <= 0:
            raise RejectedInputError("std must be positive")
        z = (grid.nodes - mean) / std
        return cls.from_density(grid, np.exp(-0.5 * z * z))

    @classmethod
    def uniform(cls, grid: Grid1D, low: float | None = None, high: float | None = None) -> GridMeasure:
        lo = grid.x_min if low is None else low
        hi = grid.x_max if high is None else high
        inside = (grid.nodes >= lo - 1e-12) & (grid.nodes <= hi + 1e-12)
        return cls.from_density(grid, inside.astype(float))

    @classmethod
    def dirac(cls, grid: Grid1D, x: float) -> GridMeasure:
        """Unit mass at ``x``; split between the two bracketing nodes if off-grid."""
        measure, _ = rebin(AtomMeasure(np.array([[x]]), np.array([1.0])), grid, threshold=0.0)
        return measure


@dataclass(frozen=True, eq=False)
class AtomMeasure:
    """Finite weighted point cloud; ``points`` has shape ``(size, k)``."""

    points: NDArray[np.float64]
    weights: NDArray[np.float64]

    def __post_init__(self) -> None:
        points = np.array(self.points, dtype=float)
        if points.ndim == 1:
            points = points.reshape(-1, 1)
        weights = np.array(self.weights, dtype=float).reshape(-1)
        if points.ndim != 2 or points.shape[1] not in (1, 2, 3):
            raise RejectedInputError(f"atoms must have dimension 1, 2 or 3, got shape {points.shape}")
        if points.shape[0] != weights.shape[0] or points.shape[0] == 0:
            raise RejectedInputError("need one weight per atom and at least one atom")
        if not np.all(np.isfinite(points)):
            raise RejectedInputError("atom locations must be finite")
        _check_weights(weights, "AtomMeasure")
        points.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @property
    def dim(self) -> int:
        return int(self.points.shape[1])

    @property
    def size(self) -> int:
        return int(self.points.shape[0])

    @property
    def support(self) -> NDArray[np.float64]:
        if self.dim != 1:
            raise RejectedInputError("support is only defined for 1-D atom clouds")
        return self.points[:, 0]

    def mean(self) -> NDArray[np.float64]:
        return self.weights @ self.points

    def marginal(self, axis: int) -> AtomMeasure:
        return AtomMeasure(self.points[:, axis : axis + 1], self.weights)

    def compact(self) -> AtomMeasure:
        """Drop zero-weight atoms and merge atoms sitting at the same point."""
        keep = self.weights > 0
        points = self.points[keep]
        unique, inverse = np.unique(points, axis=0, return_inverse=True)
        merged = np.bincount(inverse.reshape(-1), weights=self.weights[keep], minlength=len(unique))
        return AtomMeasure(unique, merged)

    def pruned(self, tol: float = MASS_TOL) -> AtomMeasure:
        """``compact`` without atoms lighter than ``tol``, renormalized to unit mass."""
        merged = self.compact()
        keep = merged.weights >= tol
        if keep.all():
            return merged
        if not keep.any():
            keep = merged.weights == merged.weights.max()
        weights = merged.weights[keep]
        return AtomMeasure(merged.points[keep], weights / weights.sum())

    @classmethod
    def uniform(cls, points: ArrayLike) -> AtomMeasure:
        pts = np.asarray(points, dtype=float)
        count = pts.shape[0]
        return cls(pts, np.full(count, 1.0 / count))


Measure = Union[GridMeasure, AtomMeasure]


def _line(m: LineMeasure) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    return np.asarray(m.support, dtype=float), np.asarray(m.weights, dtype=float)


def _points(m: Measure | LineMeasure) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    if isinstance(m, AtomMeasure):
        return m.points, m.weights
    x, w = _line(m)
    return x.reshape(-1, 1), w


def pushforward(m: GridMeasure, g: ArrayLike) -> AtomMeasure:
    """Image measure of ``m`` under a map sampled at the grid nodes.

    ``g`` has shape ``(n,)`` for a scalar map or ``(n, k)`` for a vector map such
    as ``(id, alpha)``.
    """
    values = np.asarray(g, dtype=float)
    if values.shape[0] != m.grid.n:
        raise RejectedInputError(f"map sampled on {values.shape[0]} nodes, grid has {m.grid.n}")
    if not np.all(np.isfinite(values)):
        raise RejectedInputError("pushforward map has non-finite values")
    return AtomMeasure(values.reshape(m.grid.n, -1), m.w)


def convolve(m: LineMeasure, noise: LineMeasure) -> AtomMeasure:
    """Law of ``X + Y`` for independent ``X ~ m`` and ``Y ~ noise``."""
    x, wx = _line(m)
    y, wy = _line(noise)
    points = (x[:, None] + y[None, :]).reshape(-1)
    weights = (wx[:, None] * wy[None, :]).reshape(-1)
    return AtomMeasure(points.reshape(-1, 1), weights)


def rebin(
    a: LineMeasure, grid: Grid1D, threshold: float = DEFAULT_CLAMP_THRESHOLD
) -> tuple[GridMeasure, float]:
    """Project a 1-D cloud onto ``grid`` by two-node linear splitting.

    Total mass and the first moment of in-window atoms are preserved. Atoms
    outside the window are clamped to the nearest end; the clamped mass is
    returned and must not exceed ``threshold``.
    """
    x, w = _line(a)
    slack = 1e-12 * (grid.x_max - grid.x_min)
    outside = (x < grid.x_min - slack) | (x > grid.x_max + slack)
    clamped = float(w[outside].sum())
    if clamped > threshold:
        raise GridTooSmallError(clamped, threshold)
    if clamped > 0.0:
        logger.warning("clamped %.3e of mass onto the grid boundary", clamped)

    pos = (np.clip(x, grid.x_min, grid.x_max) - grid.x_min) / grid.h
    nearest = np.rint(pos)
    pos = np.where(np.abs(pos - nearest) <= _SNAP_TOL, nearest, pos)
    idx = np.minimum(np.floor(pos).astype(np.intp), grid.n - 2)
    frac = pos - idx
    weights = np.bincount(idx, weights=w * (1.0 - frac), minlength=grid.n)
    weights += np.bincount(idx + 1, weights=w * frac, minlength=grid.n)
    return GridMeasure(grid, weights), clamped


def wasserstein1_1d(p: LineMeasure, q: LineMeasure) -> float:
    """Exact W1 between two 1-D measures as the integral of |F_p - F_q|."""
    xp, wp = _line(p)
    xq, wq = _line(q)
    merged, inverse = np.unique(np.concatenate([xp, xq]), return_inverse=True)
    inverse = inverse.reshape(-1)
    net = np.bincount(inverse[: len(xp)], weights=wp, minlength=len(merged))
    net -= np.bincount(inverse[len(xp) :], weights=wq, minlength=len(merged))
    cdf_gap = np.cumsum(net)[:-1]
    return float(np.sum(np.abs(cdf_gap) * np.diff(merged)))


def _is_uniform(weights: NDArray[np.float64]) -> bool:
    return bool(np.ptp(weights) <= 1e-15)


def _assignment(pp: NDArray[np.float64], pq: NDArray[np.float64]) -> float:
    cost = cdist(pp, pq)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / len(pp))


def _transport_lp(cost: NDArray[np.float64], wp: NDArray[np.float64], wq: NDArray[np.float64]) -> float | None:
    """Optimal plan cost, or ``None`` when HiGHS does not report an optimum."""
    n, m = cost.shape
    rows = sparse.kron(sparse.identity(n, format="csr"), sparse.csr_matrix(np.ones((1, m))))
    cols = sparse.kron(sparse.csr_matrix(np.ones((1, n))), sparse.identity(m, format="csr"))
    a_eq = sparse.vstack([rows, cols]).tocsr()
    b_eq = np.concatenate([wp / wp.sum(), wq / wq.sum()])
    result = linprog(
        cost.reshape(-1),
        A_eq=a_eq,
        b_eq=b_eq,
        bounds=(0, None),
        method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if result.status != 0 or result.x is None:
        return None
    plan = np.clip(result.x, 0.0, None)
    return float(cost.reshape(-1) @ plan)


def emd_small(
    p: Measure | LineMeasure,
    q: Measure | LineMeasure,
    cap: int = DEFAULT_SUPPORT_CAP,
    seed: int = 0,
) -> float:
    """Exact W1 with Euclidean ground cost between two small discrete measures.

    Equal-size uniform clouds are matched by the assignment solver; everything
    else goes through the transportation LP after dropping atoms lighter than
    ``MASS_TOL``. If HiGHS still fails, both sides are replaced by seeded
    stratified resamples of ``cap // 2`` atoms and matched.
    """
    pp, wp = _points(p)
    pq, wq = _points(q)
    if pp.shape[1] != pq.shape[1]:
        raise RejectedInputError(f"dimension mismatch: {pp.shape[1]} vs {pq.shape[1]}")
    if len(pp) == len(pq) and np.array_equal(pp, pq) and np.array_equal(wp, wq):
        return 0.0

    if len(pp) == len(pq) and _is_uniform(wp) and _is_uniform(wq):
        if 2 * len(pp) > cap:
            raise SupportCapError(2 * len(pp), cap)
        return _assignment(pp, pq)

    pa = AtomMeasure(pp, wp).pruned()
    qa = AtomMeasure(pq, wq).pruned()
    if pa.size + qa.size > cap:
        raise SupportCapError(pa.size + qa.size, cap)
    if pa.size == qa.size and np.array_equal(pa.points, qa.points) and np.array_equal(pa.weights, qa.weights):
        return 0.0
    value = _transport_lp(cdist(pa.points, qa.points), pa.weights, qa.weights)
    if value is not None:
        return value
    size = max(1, cap // 2)
    logger.warning("transport LP failed on %d x %d atoms; matching %d-atom resamples", pa.size, qa.size, size)
    return _assignment(subsample(pa, size, seed).points, subsample(qa, size, seed).points)


def subsample(a: AtomMeasure, size: int, seed: int = 0) -> AtomMeasure:
    """Equal-weight stratified resample of ``a`` along lexicographic order.

    The stratum offset is drawn from ``seed``, so two clouds resampled with the
    same seed use the same quantile positions.
    """
    if size < 1:
        raise RejectedInputError("subsample size must be positive")
    offset = np.random.default_rng(seed).random()
    order = np.lexsort(a.points.T[::-1])
    cumulative = np.cumsum(a.weights[order])
    targets = (np.arange(size) + offset) / size * cumulative[-1]
    picks = np.minimum(np.searchsorted(cumulative, targets, side="right"), a.size - 1)
    return AtomMeasure(a.points[order][picks], np.full(size, 1.0 / size))


def moment(m: Measure | LineMeasure, p: float = 2.0) -> float:
    """``sum_i w_i |x_i|^p`` with the Euclidean norm for vector atoms."""
    if p < 1:
        raise RejectedInputError("moment order must be >= 1")
    points, weights = _points(m)
    norms = np.linalg.norm(points, axis=1)
    return float(np.sum(weights * norms**p))


def mix(p: Measure, q: Measure, lam: float) -> Measure:
    """Convex combination ``(1 - lam) p + lam q``.

    Two grid measures on the same grid mix node-wise; otherwise the atom sets
    are concatenated with scaled weights.
    """
    if not 0.0 <= lam <= 1.0:
        raise RejectedInputError(f"mixing weight must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return p
    if lam == 1.0:
        return q
    if isinstance(p, GridMeasure) and isinstance(q, GridMeasure) and p.grid == q.grid:
        return GridMeasure(p.grid, (1.0 - lam) * p.w + lam * q.w)
    pp, wp = _points(p)
    pq, wq = _points(q)
    if pp.shape[1] != pq.shape[1]:
        raise RejectedInputError("cannot mix measures of different dimension")
    return AtomMeasure(np.vstack([pp, pq]), np.concatenate([(1.0 - lam) * wp, lam * wq]))


def inverse_cdf(m: LineMeasure, u: ArrayLike) -> NDArray[np.float64]:
    """Map uniforms in [0, 1) to draws from ``m``."""
    x, w = _line(m)
    order = np.argsort(x, kind="stable")
    x, cumulative = x[order], np.cumsum(w[order])
    picks = np.searchsorted(cumulative, np.asarray(u, dtype=float) * cumulative[-1], side="right")
    return x[np.minimum(picks, len(x) - 1)]


def sample(m: LineMeasure, seed: int, n: int) -> NDArray[np.float64]:
    """``n`` i.i.d. draws from ``m``, reproducible for a given seed."""
    if n < 1:
        raise RejectedInputError("sample size must be positive")
    return inverse_cdf(m, np.random.default_rng(seed).random(n))


@dataclass(frozen=True, eq=False)
class Belief:
    """``(mu(0), ..., mu(T-1), m(T))``: joint state-action laws and a terminal law."""

    joints: tuple[AtomMeasure, ...]
    terminal: Measure

    def __post_init__(self) -> None:
        joints = tuple(self.joints)
        if not joints:
            raise RejectedInputError("a belief needs at least one period")
        for t, mu in enumerate(joints):
            if mu.dim != 2:
                raise RejectedInputError(f"joint component {t} must be 2-D, got {mu.dim}")
        if isinstance(self.terminal, AtomMeasure) and self.terminal.dim != 1:
            raise RejectedInputError("terminal component must be 1-D")
        object.__setattr__(self, "joints", joints)

    @property
    def horizon(self) -> int:
        return len(self.joints)

    def state_marginal(self, t: int) -> Measure:
        if t == self.horizon:
            return self.terminal
        return self.joints[t].marginal(0)

    def mean_state(self, t: int) -> float:
        if t == self.horizon:
            terminal = self.terminal
            return terminal.mean() if isinstance(terminal, GridMeasure) else float(terminal.mean()[0])
        return float(self.joints[t].mean()[0])

    def mean_action(self, t: int) -> float:
        return float(self.joints[t].mean()[1])

    def second_moments(self) -> list[float]:
        return [moment(mu, 2.0) for mu in self.joints] + [moment(self.terminal, 2.0)]


def belief_distance(
    b1: Belief,
    b2: Belief,
    cap: int = DEFAULT_SUPPORT_CAP,
    seed: int = 0,
    resample: int | None = None,
) -> float:
    """Sum of component d_1 distances between two beliefs.

    Joint components above ``cap`` combined atoms, or all of them when
    ``resample`` is given, are compared through seeded stratified resamples.
    """
    if b1.horizon != b2.horizon:
        raise RejectedInputError(f"horizon mismatch: {b1.horizon} vs {b2.horizon}")
    parts: list[float] = []
    for mu1, mu2 in zip(b1.joints, b2.joints):
        if resample is not None:
            mu1, mu2 = subsample(mu1, resample, seed), subsample(mu2, resample, seed)
        else:
            mu1, mu2 = mu1.pruned(), mu2.pruned()
            if mu1.size + mu2.size > cap:
                mu1, mu2 = subsample(mu1, cap // 2, seed), subsample(mu2, cap // 2, seed)
        parts.append(emd_small(mu1, mu2, cap, seed))
    parts.append(wasserstein1_1d(b1.terminal, b2.terminal))
    return float(sum(parts))


def mix_beliefs(b1: Belief, b2: Belief, lam: float) -> Belief:
    """Component-wise ``mix``.

    Mixed joint clouds are pruned: coincident atoms merge and atoms lighter than
    ``MASS_TOL`` are dropped, which bounds the cloud size along a damped iteration.
    """
    if b1.horizon != b2.horizon:
        raise RejectedInputError(f"horizon mismatch: {b1.horizon} vs {b2.horizon}")
    joints = []
    for mu1, mu2 in zip(b1.joints, b2.joints):
        mixed = mix(mu1, mu2, lam)
        joints.append(mixed.pruned() if 0.0 < lam < 1.0 and isinstance(mixed, AtomMeasure) else mixed)
    return Belief(tuple(joints), mix(b1.terminal, b2.terminal, lam))
