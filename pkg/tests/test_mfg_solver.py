"""Tests for mfg_solver module."""

from __future__ import annotations

from typing import Callable

import numpy as np
import pytest

from riskmfg.convex_tools import gnorm_diff
from riskmfg.errors import AmbiguityError, ModelError, RejectedInputError, TreeCapError
from riskmfg.measure_kit import AtomMeasure, Belief, Grid1D, GridMeasure, belief_distance, emd_small
from riskmfg.mfg_solver import (
    CongestionSpec,
    ModelSpec,
    Policy,
    PriceSpec,
    _mean_abs_distance,
    backward_pass,
    build_policy_tree,
    congestion_eval,
    evaluate_policy_tree,
    fixed_point,
    forward_pass,
    kolmogorov_moment_bound,
    perturbation_sweep,
    price_eval,
    random_belief,
    reachable_window,
    required_window,
    validate_model,
)
from riskmfg.risk import AmbiguitySet, DiscreteNoise

ModelFactory = Callable[..., ModelSpec]


def _zero_policy_belief(model: ModelSpec) -> Belief:
    return forward_pass(Policy.zero(model.grid, model.horizon), model).belief


def _quadratic_model(model_factory: ModelFactory, p0: float = 0.0) -> ModelSpec:
    """One period, F(0) = 0, F(1) = x^2 / 2, no noise."""
    return model_factory(
        horizon=1,
        grid=Grid1D(-4.0, 4.0, 161),
        noise=DiscreteNoise.dirac(),
        ambiguity=AmbiguitySet.risk_neutral(),
        theta=[0.0, 0.5],
        p0=p0,
    )


def _oracle_model(model_factory: ModelFactory, n: int = 401) -> ModelSpec:
    return model_factory(horizon=3, grid=Grid1D(-6.0, 6.0, n), theta=0.5, p0=0.3)


def test_backward_pass_quadratic_example(model_factory: ModelFactory) -> None:
    model = _quadratic_model(model_factory)
    result = backward_pass(_zero_policy_belief(model), model)
    nodes, h = model.grid.nodes, model.grid.h
    np.testing.assert_allclose(result.policy.alpha[0], -nodes / 2, atol=h * h)
    np.testing.assert_allclose(result.u[0].values, nodes**2 / 4, atol=h * h)
    np.testing.assert_allclose(result.u[1].values, nodes**2 / 2, atol=1e-12)


def test_backward_pass_constant_price(model_factory: ModelFactory) -> None:
    p = 0.2
    model = _quadratic_model(model_factory, p0=p)
    result = backward_pass(_zero_policy_belief(model), model)
    nodes, h = model.grid.nodes, model.grid.h
    inner = slice(20, 141)
    np.testing.assert_allclose(result.policy.alpha[0][inner], -(nodes[inner] + p) / 2, atol=h * h)
    np.testing.assert_allclose(result.u[0].values[inner], (nodes[inner] - p) ** 2 / 4 - p * p / 2, atol=h * h)
    assert result.prices == (p,)


def test_backward_policy_is_certified(model_factory: ModelFactory) -> None:
    model = model_factory(eta=0.5, price_kappa=0.5)
    result = backward_pass(_zero_policy_belief(model), model)
    assert np.all(result.policy.lipschitz_constants() <= 1.0 + 1e-9)
    assert len(result.u) == model.horizon + 1
    assert len(result.ubar) == model.horizon


def test_policy_certify_rejects_steep_feedback() -> None:
    grid = Grid1D(-1.0, 1.0, 11)
    steep = Policy(grid, 2.0 * grid.nodes.reshape(1, -1))
    with pytest.raises(ModelError):
        steep.certify()
    with pytest.raises(RejectedInputError):
        Policy(grid, np.zeros((2, 5)))


def test_policy_eval_interpolates_and_extrapolates() -> None:
    grid = Grid1D(0.0, 1.0, 3)
    policy = Policy(grid, np.array([[0.0, -0.5, -1.0]]))
    np.testing.assert_allclose(policy.eval(0, [0.25, 1.5, -1.0]), [-0.25, -1.5, 1.0])


def test_forward_pass_zero_policy_no_noise_is_stationary(model_factory: ModelFactory) -> None:
    model = model_factory(horizon=3, noise=DiscreteNoise.dirac())
    result = forward_pass(Policy.zero(model.grid, model.horizon), model)
    for m in result.m:
        np.testing.assert_allclose(m.w, model.initial.w, atol=1e-15)
    assert result.clamped == (0.0, 0.0, 0.0)


def test_forward_pass_constant_drift_moves_a_dirac(model_factory: ModelFactory) -> None:
    grid = Grid1D(-5.0, 5.0, 101)
    model = model_factory(horizon=3, grid=grid, initial=GridMeasure.dirac(grid, 0.0), noise=DiscreteNoise.dirac())
    c = 2 * grid.h
    result = forward_pass(Policy(grid, np.full((3, grid.n), c)), model)
    for t, m in enumerate(result.m):
        assert m.mean() == pytest.approx(t * c)
        assert m.w.max() == pytest.approx(1.0)
    for t, mu in enumerate(result.mu):
        np.testing.assert_allclose(mu.mean(), [t * c, c])


def test_forward_pass_conserves_mass_and_respects_moment_bound(
    model_factory: ModelFactory,
    rng: np.random.Generator,
) -> None:
    grid = Grid1D(-10.0, 10.0, 201)
    for _ in range(100):
        horizon = int(rng.integers(1, 4))
        k = int(rng.integers(2, 4))
        mean = float(rng.uniform(-1.0, 1.0))
        model = model_factory(
            horizon=horizon,
            grid=grid,
            initial=GridMeasure.gaussian(grid, mean, float(rng.uniform(0.2, 0.5))),
            noise=DiscreteNoise(np.sort(rng.uniform(-0.5, 0.5, k)), rng.dirichlet(np.ones(k))),
        )
        slopes, shifts = rng.uniform(0.0, 1.0, (horizon, 1)), rng.uniform(-0.5, 0.5, (horizon, 1))
        policy = Policy(grid, -slopes * (grid.nodes[None, :] - mean) + shifts)
        result = forward_pass(policy, model)
        bound = kolmogorov_moment_bound(model, policy)
        for m in result.m:
            assert m.w.sum() == pytest.approx(1.0, abs=1e-12)
        assert max(result.belief.second_moments()) <= bound


def test_forward_pass_rejects_horizon_mismatch(model_factory: ModelFactory) -> None:
    model = model_factory(horizon=2)
    with pytest.raises(RejectedInputError):
        forward_pass(Policy.zero(model.grid, 3), model)


def test_fixed_point_decoupled_converges_in_one_update(model_factory: ModelFactory) -> None:
    model = model_factory()
    solution = fixed_point(model, damping=1.0, tol=1e-12, max_iter=5)
    assert solution.converged
    assert solution.iterations == 1
    assert len(solution.residuals) == 2
    assert solution.residual <= 1e-12


def test_fixed_point_without_damping_never_moves(model_factory: ModelFactory) -> None:
    model = model_factory()
    solution = fixed_point(model, damping=0.0, tol=1e-6, max_iter=3)
    assert not solution.converged
    assert solution.iterations == 3
    assert len(set(solution.residuals)) == 1
    assert len(solution.residuals) == 4


def test_fixed_point_zero_iterations(model_factory: ModelFactory) -> None:
    solution = fixed_point(model_factory(), damping=0.5, tol=1e-6, max_iter=0)
    assert not solution.converged
    assert solution.iterations == 0
    assert len(solution.residuals) == 1
    assert solution.best_iteration == 0


def test_fixed_point_rejects_bad_damping(model_factory: ModelFactory) -> None:
    with pytest.raises(RejectedInputError):
        fixed_point(model_factory(), damping=1.5)


def test_fixed_point_reported_residual_is_reproducible(model_factory: ModelFactory) -> None:
    model = model_factory(eta=0.2, price_kappa=0.2)
    solution = fixed_point(model, damping=0.5, tol=1e-8, max_iter=4)
    back = backward_pass(solution.belief, model)
    induced = forward_pass(back.policy, model).belief
    assert belief_distance(solution.belief, induced) == pytest.approx(solution.residual, abs=1e-12)
    assert solution.residual == min(solution.residuals)


def test_fixed_point_coupled_model_converges(model_factory: ModelFactory) -> None:
    model = model_factory(eta=0.2, price_kappa=0.2)
    solution = fixed_point(model, damping=0.5, tol=1e-2, max_iter=60)
    assert solution.converged
    assert solution.residual <= 1e-2
    assert np.all(np.isfinite(solution.residuals))


def test_value_function_is_stable_in_the_belief(model_factory: ModelFactory, rng: np.random.Generator) -> None:
    model = model_factory(grid=Grid1D(-5.0, 5.0, 41), eta=0.5, price_kappa=0.5)
    for _ in range(50):
        b1, b2 = random_belief(model, rng), random_belief(model, rng)
        d = belief_distance(b1, b2)
        r1, r2 = backward_pass(b1, model), backward_pass(b2, model)
        assert gnorm_diff(r1.u[0], r2.u[0], 2) <= 50.0 * d
        alpha_gap = np.max(np.abs(r1.policy.alpha - r2.policy.alpha) / (1.0 + np.abs(model.grid.nodes)))
        assert alpha_gap <= 50.0 * (np.sqrt(d) + d)


def test_dp_value_matches_tree_evaluation(model_factory: ModelFactory) -> None:
    model = _oracle_model(model_factory)
    solution = fixed_point(model, damping=1.0, tol=1e-12, max_iter=2)
    tree_value = evaluate_policy_tree(model, solution.policy, solution.belief)
    assert tree_value == pytest.approx(solution.value, abs=5e-3)


def test_dp_value_gap_shrinks_with_the_grid(model_factory: ModelFactory) -> None:
    gaps = []
    for n in (401, 801):
        model = _oracle_model(model_factory, n)
        b = _zero_policy_belief(model)
        result = backward_pass(b, model)
        dp_value = float(result.u[0].values @ model.initial.w)
        gaps.append(abs(evaluate_policy_tree(model, result.policy, b) - dp_value))
    assert gaps[0] <= 5e-3
    assert gaps[0] >= 3.0 * gaps[1]


def test_perturbations_do_not_beat_the_policy(model_factory: ModelFactory) -> None:
    model = _oracle_model(model_factory)
    b = _zero_policy_belief(model)
    policy = backward_pass(b, model).policy
    report = perturbation_sweep(model, policy, b, count=50, scale=0.1, seed=3)
    assert len(report.values) == 50
    assert report.worst_gap >= -5e-3


def test_policy_tree_respects_cap(model_factory: ModelFactory) -> None:
    model = model_factory()
    b = _zero_policy_belief(model)
    with pytest.raises(TreeCapError):
        build_policy_tree(model, Policy.zero(model.grid, model.horizon), b, tree_cap=10)


def test_price_and_congestion_evaluation(model_factory: ModelFactory) -> None:
    model = model_factory(horizon=1, eta=0.0, theta=0.0, kappa=1.5, p0=0.4)
    b = _zero_policy_belief(model)
    np.testing.assert_allclose(congestion_eval(0, [-1.0, 2.0], b, model.congestion), [1.5, 1.5])
    assert price_eval(0, b, model.price) == 0.4

    grid = Grid1D(-1.0, 1.0, 3)
    joint = AtomMeasure(np.array([[0.0, 3.0]]), np.array([1.0]))
    clipped = Belief((joint,), GridMeasure.dirac(grid, 0.0))
    spec = PriceSpec.build(1, 0.1, kappa=2.0, clip=1.0)
    assert price_eval(0, clipped, spec) == pytest.approx(2.1)


def test_price_is_lipschitz_in_the_joint_law(rng: np.random.Generator) -> None:
    spec = PriceSpec.build(1, 0.0, kappa=0.7, clip=1.0)
    grid = Grid1D(-1.0, 1.0, 3)
    terminal = GridMeasure.dirac(grid, 0.0)
    for _ in range(50):
        mu1 = AtomMeasure(rng.normal(size=(6, 2)), rng.dirichlet(np.ones(6)))
        mu2 = AtomMeasure(rng.normal(size=(6, 2)), rng.dirichlet(np.ones(6)))
        gap = abs(price_eval(0, Belief((mu1,), terminal), spec) - price_eval(0, Belief((mu2,), terminal), spec))
        assert gap <= 0.7 * emd_small(mu1, mu2) + 1e-9


def test_crowd_family_matches_brute_force(rng: np.random.Generator) -> None:
    support = rng.normal(size=12)
    weights = rng.dirichlet(np.ones(12))
    x = np.linspace(-3.0, 3.0, 25)
    brute = np.array([np.sum(weights * np.abs(xi - support)) for xi in x])
    np.testing.assert_allclose(_mean_abs_distance(x, support, weights), brute, atol=1e-12)


def test_crowd_family_builds_convex_costs(model_factory: ModelFactory) -> None:
    model = model_factory(family="crowd", eta=0.5, price_kappa=0.3)
    report = validate_model(model, samples=3)
    assert report.ok
    solution = fixed_point(model, damping=0.5, tol=1e-2, max_iter=40)
    assert np.all(np.isfinite(solution.policy.alpha))


def test_validate_model_flags_large_caps(model_factory: ModelFactory) -> None:
    assert validate_model(model_factory(eta=0.5)).ok
    report = validate_model(model_factory(ambiguity=AmbiguitySet.cvar(0.05)))
    assert not report.ok
    assert any(name.startswith("ambiguity") and not passed for name, passed, _ in report.checks)


def test_model_spec_rejects_inconsistent_inputs() -> None:
    grid = Grid1D(-1.0, 1.0, 11)
    base = dict(
        horizon=2,
        grid=grid,
        initial=GridMeasure.uniform(grid),
        noises=(DiscreteNoise.dirac(),) * 2,
        ambiguity=(AmbiguitySet.risk_neutral(),) * 2,
        congestion=CongestionSpec.build(2),
        price=PriceSpec.build(2),
    )
    ModelSpec(**base)  # type: ignore[arg-type]
    with pytest.raises(RejectedInputError):
        ModelSpec(**{**base, "noises": (DiscreteNoise.dirac(),)})  # type: ignore[arg-type]
    with pytest.raises(RejectedInputError):
        ModelSpec(**{**base, "price": PriceSpec.build(3)})  # type: ignore[arg-type]
    with pytest.raises(AmbiguityError):
        ModelSpec(**{**base, "ambiguity": (AmbiguitySet.box([0.5, 0.5], [2.0, 2.0]),) * 2})  # type: ignore[arg-type]
    with pytest.raises(ModelError):
        CongestionSpec.build(2, eta=-1.0)


def test_windows_contain_reachable_states(model_factory: ModelFactory) -> None:
    model = model_factory(horizon=2)
    b = _zero_policy_belief(model)
    policy = backward_pass(b, model).policy
    lo, hi = reachable_window(model, policy)
    wide_lo, wide_hi = required_window(model, float(policy.sup_norm().max()))
    assert wide_lo <= lo < hi <= wide_hi
    final = forward_pass(policy, model).m[-1]
    support = model.grid.nodes[final.w > 1e-6]
    slack = (model.horizon + 1) * model.grid.h
    assert lo - slack <= support.min() and support.max() <= hi + slack
