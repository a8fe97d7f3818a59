"""Backward/forward passes and the damped fixed point of the mean field system.

The backward pass works in prox form: with ``ubar = upsilon(u(t+1))`` and the
price ``P`` of period ``t``,

    u(t, x)   = moreau(ubar, x - P) + F(t, x) - P^2 / 2
    alpha_t(x) = prox(ubar, x - P) - x

``u(t+1)`` enters ``upsilon`` through this formula at the shifted states
``x + y``, not through its grid interpolant, and ``ubar`` keeps the kinks that
fall between grid nodes. The forward pass pushes the population law through
``x + alpha_t(x)`` and the period noise, projecting back onto the grid after
every step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Literal, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .convex_tools import PwlConvex, PwlKnots, moreau, moreau_curve, prox, q_class_check, repair_convexity
from .errors import AmbiguityError, ConvexityError, ModelError, RejectedInputError, TreeCapError
from .measure_kit import (
    DEFAULT_CLAMP_THRESHOLD,
    DEFAULT_SUPPORT_CAP,
    AtomMeasure,
    Belief,
    Grid1D,
    GridMeasure,
    belief_distance,
    convolve,
    inverse_cdf,
    mix_beliefs,
    moment,
    pushforward,
    rebin,
)
from .risk import (
    AmbiguitySet,
    DiscreteNoise,
    ScenarioTree,
    composite_risk_tree,
    upsilon_knots,
    validate_ambiguity,
)

logger = logging.getLogger(__name__)

LIPSCHITZ_TOL = 1e-9
DEFAULT_TREE_CAP = 10**6

CongestionFamily = Literal["mean_distance", "crowd"]


def _per_period(values: float | Sequence[float], count: int, name: str) -> tuple[float, ...]:
    if isinstance(values, (int, float)):
        return (float(values),) * count
    out = tuple(float(v) for v in values)
    if len(out) != count:
        raise RejectedInputError(f"{name} needs {count} entries, got {len(out)}")
    return out


@dataclass(frozen=True)
class CongestionSpec:
    """``F(t, x, b) = eta_t * D(x, b, t) + theta_t * x^2 + kappa_t`` over periods ``0..T``.

    ``mean_distance`` uses ``D = |x - mean state|``; ``crowd`` uses the mean
    distance to the state marginal, ``D = E|x - X_t|``.
    """

    family: CongestionFamily = "mean_distance"
    eta: tuple[float, ...] = ()
    theta: tuple[float, ...] = ()
    kappa: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.family not in ("mean_distance", "crowd"):
            raise ModelError(f"unknown congestion family {self.family!r}")
        if not (len(self.eta) == len(self.theta) == len(self.kappa)):
            raise RejectedInputError("eta, theta and kappa need one entry per period")
        if any(v < 0 for v in self.eta) or any(v < 0 for v in self.theta):
            raise ModelError("eta and theta must be nonnegative for F to be convex")

    @classmethod
    def build(
        cls,
        horizon: int,
        family: CongestionFamily = "mean_distance",
        eta: float | Sequence[float] = 0.0,
        theta: float | Sequence[float] = 0.0,
        kappa: float | Sequence[float] = 0.0,
    ) -> CongestionSpec:
        count = horizon + 1
        return cls(
            family,
            _per_period(eta, count, "eta"),
            _per_period(theta, count, "theta"),
            _per_period(kappa, count, "kappa"),
        )

    @property
    def coupled(self) -> bool:
        return any(v != 0 for v in self.eta)


@dataclass(frozen=True)
class PriceSpec:
    """``P(t, b) = p0_t + kappa * clip(mean action of mu(t), -clip, clip)``."""

    p0: tuple[float, ...] = ()
    kappa: float = 0.0
    clip: float = 1.0

    def __post_init__(self) -> None:
        if self.clip < 0 or not math.isfinite(self.clip):
            raise RejectedInputError("price clip must be finite and nonnegative")

    @classmethod
    def build(cls, horizon: int, p0: float | Sequence[float] = 0.0, kappa: float = 0.0, clip: float = 1.0) -> PriceSpec:
        return cls(_per_period(p0, horizon, "p0"), float(kappa), float(clip))

    def bound(self, t: int) -> float:
        return abs(self.p0[t]) + abs(self.kappa) * self.clip


def _mean_abs_distance(x: NDArray[np.float64], support: NDArray[np.float64], weights: NDArray[np.float64]) -> NDArray[np.float64]:
    """``E|x - Y|`` for ``Y`` discrete, via cumulative sums over the sorted support."""
    order = np.argsort(support, kind="stable")
    y, w = support[order], weights[order]
    cum_w = np.concatenate([[0.0], np.cumsum(w)])
    cum_yw = np.concatenate([[0.0], np.cumsum(w * y)])
    k = np.searchsorted(y, x, side="right")
    below_w, below_yw = cum_w[k], cum_yw[k]
    return x * (2.0 * below_w - 1.0) + (cum_yw[-1] - 2.0 * below_yw)


def congestion_eval(t: int, x: ArrayLike, b: Belief, spec: CongestionSpec) -> NDArray[np.float64]:
    x = np.asarray(x, dtype=float)
    if spec.family == "mean_distance":
        spread = np.abs(x - b.mean_state(t)) if spec.eta[t] else np.zeros_like(x)
    elif spec.family == "crowd":
        marginal = b.state_marginal(t)
        spread = (
            _mean_abs_distance(x, np.asarray(marginal.support, dtype=float), np.asarray(marginal.weights, dtype=float))
            if spec.eta[t]
            else np.zeros_like(x)
        )
    else:
        raise ModelError(f"unknown congestion family {spec.family!r}")
    return spec.eta[t] * spread + spec.theta[t] * x * x + spec.kappa[t]


def price_eval(t: int, b: Belief, spec: PriceSpec) -> float:
    if spec.kappa == 0.0:
        return spec.p0[t]
    aggregate = float(np.clip(b.mean_action(t), -spec.clip, spec.clip))
    return spec.p0[t] + spec.kappa * aggregate


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Problem data: horizon, grid, initial law, noises, ambiguity, cost families."""

    horizon: int
    grid: Grid1D
    initial: GridMeasure
    noises: tuple[DiscreteNoise, ...]
    ambiguity: tuple[AmbiguitySet, ...]
    congestion: CongestionSpec
    price: PriceSpec
    moment_cap: float = 10.0
    belief_cap: float | None = None
    clamp_threshold: float = DEFAULT_CLAMP_THRESHOLD

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise RejectedInputError("horizon must be at least 1")
        object.__setattr__(self, "noises", tuple(self.noises))
        object.__setattr__(self, "ambiguity", tuple(self.ambiguity))
        if len(self.noises) != self.horizon or len(self.ambiguity) != self.horizon:
            raise RejectedInputError(f"need {self.horizon} noise laws and ambiguity sets")
        if len(self.congestion.eta) != self.horizon + 1:
            raise RejectedInputError(f"congestion needs {self.horizon + 1} periods")
        if len(self.price.p0) != self.horizon:
            raise RejectedInputError(f"price needs {self.horizon} periods")
        if self.initial.grid != self.grid:
            raise RejectedInputError("initial law lives on a different grid")
        for t, (noise, amb) in enumerate(zip(self.noises, self.ambiguity)):
            try:
                amb.bounds(noise)
            except AmbiguityError as exc:
                raise AmbiguityError(f"period {t}: {exc}") from exc

    @property
    def decoupled(self) -> bool:
        return not self.congestion.coupled and self.price.kappa == 0.0

    def cost_curve(self, t: int, b: Belief) -> PwlConvex:
        """``F(t, ., b)`` sampled on the grid."""
        values = congestion_eval(t, self.grid.nodes, b, self.congestion)
        chords = np.diff(values) / self.grid.h
        try:
            return repair_convexity(self.grid, values, float(chords[0]), float(chords[-1]))
        except ConvexityError as exc:
            raise ModelError(f"congestion cost at t={t} is not convex: {exc}") from exc

    def cost_kinks(self, t: int, b: Belief) -> NDArray[np.float64]:
        """States where ``F(t, ., b)`` bends: the mean state, or the marginal support for ``crowd``."""
        if self.congestion.eta[t] == 0.0:
            return np.empty(0)
        if self.congestion.family == "mean_distance":
            return np.array([b.mean_state(t)])
        return np.asarray(b.state_marginal(t).support, dtype=float)


@dataclass(frozen=True, eq=False)
class Policy:
    """Feedback ``alpha_t`` sampled at the grid nodes, shape ``(T, n)``."""

    grid: Grid1D
    alpha: NDArray[np.float64]

    def __post_init__(self) -> None:
        alpha = np.array(self.alpha, dtype=float)
        if alpha.ndim != 2 or alpha.shape[1] != self.grid.n:
            raise RejectedInputError(f"policy must have shape (T, {self.grid.n}), got {alpha.shape}")
        if not np.all(np.isfinite(alpha)):
            raise RejectedInputError("policy has non-finite values")
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)

    @property
    def horizon(self) -> int:
        return int(self.alpha.shape[0])

    @classmethod
    def zero(cls, grid: Grid1D, horizon: int) -> Policy:
        return cls(grid, np.zeros((horizon, grid.n)))

    @cached_property
    def _end_slopes(self) -> NDArray[np.float64]:
        h = self.grid.h
        return np.stack([(self.alpha[:, 1] - self.alpha[:, 0]) / h, (self.alpha[:, -1] - self.alpha[:, -2]) / h], axis=1)

    def eval(self, t: int, x: ArrayLike) -> NDArray[np.float64]:
        """Linear interpolation between nodes, linear extrapolation beyond."""
        x = np.asarray(x, dtype=float)
        grid, row = self.grid, self.alpha[t]
        left, right = self._end_slopes[t]
        inside = np.interp(x, grid.nodes, row)
        return np.where(
            x < grid.x_min,
            row[0] + left * (x - grid.x_min),
            np.where(x > grid.x_max, row[-1] + right * (x - grid.x_max), inside),
        )

    def lipschitz_constants(self) -> NDArray[np.float64]:
        return np.max(np.abs(np.diff(self.alpha, axis=1)), axis=1) / self.grid.h

    def certify(self, tol: float = LIPSCHITZ_TOL) -> None:
        worst = self.lipschitz_constants()
        bad = np.flatnonzero(worst > 1.0 + tol)
        if bad.size:
            raise ModelError(f"alpha_{bad[0]} has Lipschitz constant {worst[bad[0]]:.12g} > 1")

    def sup_norm(self) -> NDArray[np.float64]:
        return np.max(np.abs(self.alpha), axis=1)

    def shifted(self, delta: ArrayLike) -> Policy:
        return Policy(self.grid, self.alpha + np.asarray(delta, dtype=float))


@dataclass(frozen=True)
class BackwardResult:
    u: tuple[PwlConvex, ...]
    ubar: tuple[PwlKnots, ...]
    policy: Policy
    prices: tuple[float, ...]


@dataclass(frozen=True)
class ForwardResult:
    m: tuple[GridMeasure, ...]
    mu: tuple[AtomMeasure, ...]
    belief: Belief
    clamped: tuple[float, ...]


def _stage_value(
    t: int, b: Belief, model: ModelSpec, ubar: PwlKnots | None, price: float
) -> Callable[[NDArray[np.float64]], NDArray[np.float64]]:
    """``u(t, .)`` at arbitrary states; the terminal stage has no ``ubar``."""

    def value(x: NDArray[np.float64]) -> NDArray[np.float64]:
        cost = congestion_eval(t, x, b, model.congestion)
        if ubar is None:
            return cost
        return moreau(ubar, x - price) + cost - 0.5 * price * price

    return value


def backward_pass(b: Belief, model: ModelSpec) -> BackwardResult:
    """Dynamic programming in prox/Moreau form against a frozen belief."""
    if b.horizon != model.horizon:
        raise RejectedInputError(f"belief horizon {b.horizon} does not match model horizon {model.horizon}")
    grid, nodes = model.grid, model.grid.nodes
    T = model.horizon
    u: list[PwlConvex] = [PwlConvex.zero(grid)] * (T + 1)
    ubar: list[PwlKnots] = []
    alpha = np.zeros((T, grid.n))
    prices = [price_eval(t, b, model.price) for t in range(T)]

    u[T] = model.cost_curve(T, b)
    value = _stage_value(T, b, model, None, 0.0)
    for t in reversed(range(T)):
        try:
            current = upsilon_knots(value, model.noises[t], model.ambiguity[t], grid, model.cost_kinks(t + 1, b))
            envelope = moreau_curve(current, grid, prices[t])
        except ConvexityError as exc:
            raise ModelError(f"value function at t={t} lost convexity: {exc}") from exc
        u[t] = (envelope + model.cost_curve(t, b)).plus_constant(-0.5 * prices[t] ** 2)
        alpha[t] = prox(current, nodes - prices[t]) - nodes
        ubar.insert(0, current)
        value = _stage_value(t, b, model, current, prices[t])

    policy = Policy(grid, alpha)
    policy.certify()
    return BackwardResult(tuple(u), tuple(ubar), policy, tuple(prices))


def kolmogorov_moment_bound(model: ModelSpec, policy: Policy) -> float:
    """Minkowski bound on every second moment along the forward pass.

    Each step adds ``sup |alpha_t|``, the noise root second moment and one grid
    spacing for the projection onto the grid.
    """
    root = math.sqrt(moment(model.initial, 2.0))
    bound = root**2
    for t, a_max in enumerate(policy.sup_norm()):
        bound = max(bound, (root + a_max) ** 2)
        root += a_max + math.sqrt(model.noises[t].second_moment()) + model.grid.h
    return max(bound, root**2)


def required_window(model: ModelSpec, alpha_bound: float) -> tuple[float, float]:
    """Smallest window holding the reachable states when ``|alpha| <= alpha_bound``.

    The initial law is cut at the clamp threshold quantiles.
    """
    tail = model.clamp_threshold / 2.0
    lo, hi = inverse_cdf(model.initial, [tail, 1.0 - tail])
    drift = model.horizon * alpha_bound
    lo = float(lo) - drift + sum(float(nz.support.min()) for nz in model.noises)
    hi = float(hi) + drift + sum(float(nz.support.max()) for nz in model.noises)
    return lo, hi


def reachable_window(model: ModelSpec, policy: Policy) -> tuple[float, float]:
    """Reachable window of ``policy``, from the clamp threshold quantiles of the initial law.

    ``x + alpha_t(x)`` is nondecreasing for a certified policy, so the two ends
    of the window map to the two ends of the next one.
    """
    tail = model.clamp_threshold / 2.0
    lo, hi = (float(v) for v in inverse_cdf(model.initial, [tail, 1.0 - tail]))
    for t, noise in enumerate(model.noises):
        lo = lo + float(policy.eval(t, lo)) + float(noise.support.min())
        hi = hi + float(policy.eval(t, hi)) + float(noise.support.max())
    return lo, hi


def forward_pass(policy: Policy, model: ModelSpec) -> ForwardResult:
    """Kolmogorov recursion ``m(t+1) = nu(t) * (id + alpha_t)#m(t)`` on the grid."""
    if policy.horizon != model.horizon:
        raise RejectedInputError("policy horizon does not match the model")
    nodes = model.grid.nodes
    m = [model.initial]
    mu: list[AtomMeasure] = []
    clamped: list[float] = []
    for t in range(model.horizon):
        current = m[-1]
        a = policy.alpha[t]
        mu.append(pushforward(current, np.column_stack([nodes, a])).compact())
        moved = convolve(pushforward(current, nodes + a), model.noises[t])
        nxt, lost = rebin(moved, model.grid, model.clamp_threshold)
        m.append(nxt)
        clamped.append(lost)

    belief = Belief(tuple(mu), m[-1])
    cap = model.belief_cap if model.belief_cap is not None else kolmogorov_moment_bound(model, policy)
    moments = belief.second_moments()
    if max(moments) > cap * (1.0 + 1e-12):
        logger.warning("belief second moment %.6g exceeds cap %.6g", max(moments), cap)
    return ForwardResult(tuple(m), tuple(mu), belief, tuple(clamped))


@dataclass(frozen=True, eq=False)
class MfgSolution:
    u: tuple[PwlConvex, ...]
    ubar: tuple[PwlKnots, ...]
    policy: Policy
    m: tuple[GridMeasure, ...]
    mu: tuple[AtomMeasure, ...]
    belief: Belief
    induced: Belief
    residuals: tuple[float, ...]
    converged: bool
    iterations: int
    best_iteration: int

    @property
    def residual(self) -> float:
        return self.residuals[self.best_iteration]

    @property
    def value(self) -> float:
        """``E[u(0, X_0)]`` under the initial law."""
        return float(self.u[0].values @ self.m[0].w)


def fixed_point(
    model: ModelSpec,
    damping: float = 0.5,
    tol: float = 1e-3,
    max_iter: int = 200,
    distance_cap: int = DEFAULT_SUPPORT_CAP,
    distance_seed: int = 0,
    initial_belief: Belief | None = None,
) -> MfgSolution:
    """Damped Picard iteration ``b <- (1 - damping) b + damping Phi(b)``.

    ``Phi`` is one backward pass followed by one forward pass. The residual of
    iterate ``k`` is ``d(b_k, Phi(b_k))``; the iterate with the smallest residual
    is returned whether or not ``tol`` was reached.
    """
    if not 0.0 <= damping <= 1.0:
        raise RejectedInputError(f"damping must lie in [0, 1], got {damping}")
    if max_iter < 0:
        raise RejectedInputError("max_iter must be nonnegative")
    b = initial_belief or forward_pass(Policy.zero(model.grid, model.horizon), model).belief

    residuals: list[float] = []
    best: tuple[int, Belief, BackwardResult, ForwardResult] | None = None
    converged = False
    iterations = 0
    for k in range(max_iter + 1):
        back = backward_pass(b, model)
        fwd = forward_pass(back.policy, model)
        r = belief_distance(b, fwd.belief, distance_cap, distance_seed)
        residuals.append(r)
        logger.info("iteration %d: residual %.6e", k, r)
        if best is None or r < residuals[best[0]]:
            best = (k, b, back, fwd)
        if r <= tol:
            converged = True
            break
        if k == max_iter:
            break
        b = mix_beliefs(b, fwd.belief, damping)
        iterations += 1

    assert best is not None
    k, b, back, fwd = best
    if not converged:
        logger.warning("no convergence after %d updates; best residual %.6e", iterations, residuals[k])
    return MfgSolution(
        u=back.u,
        ubar=back.ubar,
        policy=back.policy,
        m=fwd.m,
        mu=fwd.mu,
        belief=b,
        induced=fwd.belief,
        residuals=tuple(residuals),
        converged=converged,
        iterations=iterations,
        best_iteration=k,
    )


def running_cost(t: int, x: ArrayLike, a: ArrayLike, b: Belief, model: ModelSpec) -> NDArray[np.float64]:
    """``l(t, x, a, b) = a^2 / 2 + a P(t, b) + F(t, x, b)``."""
    a = np.asarray(a, dtype=float)
    return 0.5 * a * a + a * price_eval(t, b, model.price) + congestion_eval(t, x, b, model.congestion)


def build_policy_tree(model: ModelSpec, policy: Policy, b: Belief, tree_cap: int = DEFAULT_TREE_CAP) -> ScenarioTree:
    """Closed-loop scenario tree under ``policy`` with total cost at the leaves."""
    keep = model.initial.w > 0
    states = model.grid.nodes[keep]
    size = int(states.size * np.prod([nz.size for nz in model.noises]))
    if size > tree_cap:
        raise TreeCapError(size, tree_cap)

    cost = np.zeros_like(states)
    for t in range(model.horizon):
        a = policy.eval(t, states)
        cost = cost + running_cost(t, states, a, b, model)
        y = model.noises[t].support
        states = (states + a)[..., None] + y
        cost = np.broadcast_to(cost[..., None], states.shape)
    cost = cost + congestion_eval(model.horizon, states, b, model.congestion)
    root = model.initial.w[keep]
    return ScenarioTree(root / root.sum(), model.noises, cost)


def evaluate_policy_tree(model: ModelSpec, policy: Policy, b: Belief, tree_cap: int = DEFAULT_TREE_CAP) -> float:
    """Exact composite risk of the closed-loop cost of ``policy`` against belief ``b``."""
    return composite_risk_tree(build_policy_tree(model, policy, b, tree_cap), model.ambiguity)


@dataclass(frozen=True)
class PerturbationReport:
    baseline: float
    values: tuple[float, ...]

    @property
    def worst_gap(self) -> float:
        """Most negative ``value - baseline`` (negative means a perturbation did better)."""
        return min(v - self.baseline for v in self.values) if self.values else 0.0


def perturbation_sweep(
    model: ModelSpec,
    policy: Policy,
    b: Belief,
    count: int = 50,
    scale: float = 0.1,
    seed: int = 0,
    tree_cap: int = DEFAULT_TREE_CAP,
) -> PerturbationReport:
    """Tree values of ``policy`` and of ``count`` smooth random perturbations of it."""
    rng = np.random.default_rng(seed)
    nodes = model.grid.nodes
    baseline = evaluate_policy_tree(model, policy, b, tree_cap)
    values = []
    for _ in range(count):
        shift, tilt = rng.uniform(-scale, scale, size=(2, model.horizon, 1))
        delta = shift + tilt * np.tanh(nodes)[None, :]
        values.append(evaluate_policy_tree(model, policy.shifted(delta), b, tree_cap))
    return PerturbationReport(baseline, tuple(values))


@dataclass
class ModelDiagnostics:
    checks: list[tuple[str, bool, str]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(passed for _, passed, _ in self.checks)

    def add(self, name: str, passed: bool, detail: str = "") -> None:
        self.checks.append((name, passed, detail))


def random_belief(model: ModelSpec, rng: np.random.Generator, action_scale: float = 1.0) -> Belief:
    """Belief with random grid-supported joints and terminal law, for stability checks."""
    nodes = model.grid.nodes
    joints = []
    for _ in range(model.horizon):
        w = rng.dirichlet(np.ones(model.grid.n))
        a = rng.uniform(-action_scale, action_scale, model.grid.n)
        joints.append(AtomMeasure(np.column_stack([nodes, a]), w))
    return Belief(tuple(joints), GridMeasure(model.grid, rng.dirichlet(np.ones(model.grid.n))))


def validate_model(model: ModelSpec, samples: int = 5, seed: int = 0) -> ModelDiagnostics:
    """Moment caps, ambiguity sets, price bound and convexity checks of F at random beliefs."""
    report = ModelDiagnostics()
    c = model.moment_cap
    m0 = moment(model.initial, 2.0)
    report.add("initial moment", m0 <= c, f"E[X0^2]={m0:.6g}, C={c:.6g}")
    for t, (noise, amb) in enumerate(zip(model.noises, model.ambiguity)):
        m2 = noise.second_moment()
        report.add(f"noise moment t={t}", m2 <= c, f"E[Y^2]={m2:.6g}")
        diag = validate_ambiguity(amb, noise, c)
        report.add(f"ambiguity t={t}", diag.ok, "; ".join(diag.failures) or amb.kind)
        report.warnings.extend(f"t={t}: {w}" for w in diag.warnings)
        bound = model.price.bound(t)
        report.add(f"price bound t={t}", bound <= c, f"|P| <= {bound:.6g}")

    rng = np.random.default_rng(seed)
    for k in range(samples):
        b = random_belief(model, rng)
        for t in range(model.horizon + 1):
            try:
                f = model.cost_curve(t, b)
            except ModelError as exc:
                report.add(f"congestion convexity sample {k}", False, str(exc))
                break
            q = q_class_check(f, c, 2)
            if not q.ok:
                report.add(f"congestion class sample {k}", False, f"t={t}: {q.reason} at x={q.witness:.6g}")
                break
        else:
            report.add(f"congestion sample {k}", True, "convex, in Q_2^C")
    return report
