import numpy as np
import pytest

from oracles import refine_grid_min, row_objective_fn, scalar_grid_min
from simnet.row_solver import (
    EXACT_MATCH_TOL,
    Penalty,
    RowProblem,
    RowSolution,
    RowSolverError,
    SolverConfig,
    _berhu_ball_prox,
    berhu_penalty,
    berhu_prox,
    gram_norm,
    project_l1_ball,
    row_objective,
    soft_threshold,
    solve_row,
)

TIGHT = SolverConfig(tol_primal=1e-8, tol_dual=1e-8)


def test_soft_threshold_hand_values():
    np.testing.assert_allclose(
        soft_threshold(np.array([2.0, -0.5]), 1.0), [1.0, 0.0], atol=1e-15
    )
    v = np.array([0.3, -1.2, 0.0])
    np.testing.assert_array_equal(soft_threshold(v, 0.0), v)


def test_soft_threshold_matches_grid():
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = float(rng.uniform(-3, 3))
        tau = float(rng.uniform(0, 2))
        x_star, _ = scalar_grid_min(
            lambda x: 0.5 * (x - v) ** 2 + tau * np.abs(x), -4.0, 4.0, 1e-4
        )
        np.testing.assert_allclose(
            soft_threshold(np.array([v]), tau)[0], x_star, atol=1e-3
        )


def test_berhu_penalty_hand_values():
    assert berhu_penalty(0.0) == 0.0
    assert berhu_penalty(0.5) == pytest.approx(1.0)
    assert berhu_penalty(2.0) == pytest.approx(5.0)
    assert berhu_penalty(-2.0) == pytest.approx(5.0)


def test_berhu_penalty_is_partial_min_over_t():
    ts = np.arange(1e-4, 1.0 + 1e-4, 1e-4)
    rng = np.random.default_rng(1)
    for _ in range(30):
        m = float(rng.uniform(-10, 10))
        expected = float(np.min(m * m / ts + ts))
        assert abs(berhu_penalty(m) - expected) <= 1e-3


def test_berhu_penalty_vectorized():
    v = np.array([0.0, 0.5, 2.0, -3.0])
    np.testing.assert_allclose(berhu_penalty(v), [0.0, 1.0, 5.0, 10.0], atol=1e-12)


def test_berhu_prox_hand_values():
    assert berhu_prox(np.array([0.1]), 0.1)[0] == 0.0
    np.testing.assert_allclose(berhu_prox(np.array([1.0]), 0.1)[0], 0.8, atol=1e-12)
    np.testing.assert_allclose(berhu_prox(np.array([3.0]), 0.5)[0], 1.5, atol=1e-12)


def test_berhu_prox_matches_grid():
    rng = np.random.default_rng(2)
    for _ in range(25):
        v = float(rng.uniform(-4, 4))
        c = float(rng.uniform(0, 1.5))
        x_star, f_star = scalar_grid_min(
            lambda x: 0.5 * (x - v) ** 2 + c * berhu_penalty(x), -5.0, 5.0, 1e-4
        )
        x = berhu_prox(np.array([v]), c)[0]
        f = 0.5 * (x - v) ** 2 + c * berhu_penalty(x)
        assert f <= f_star + 1e-6
        np.testing.assert_allclose(x, x_star, atol=1e-3)


def test_project_l1_ball_hand_values():
    np.testing.assert_array_equal(
        project_l1_ball(np.array([0.2, 0.3]), 1.0), [0.2, 0.3]
    )
    np.testing.assert_allclose(
        project_l1_ball(np.array([3.0, 0.0]), 1.0), [1.0, 0.0], atol=1e-12
    )
    np.testing.assert_allclose(
        project_l1_ball(np.array([2.0, 1.0]), 1.0), [1.0, 0.0], atol=1e-12
    )


def test_project_l1_ball_properties():
    rng = np.random.default_rng(3)
    for _ in range(50):
        d = int(rng.integers(1, 8))
        v = rng.normal(size=d) * 3
        radius = float(rng.uniform(0.2, 2.0))
        x = project_l1_ball(v, radius)
        assert np.sum(np.abs(x)) <= radius + 1e-10
        np.testing.assert_allclose(project_l1_ball(x, radius), x, atol=1e-12)
        # no feasible point may be closer to v
        dist = np.sum((x - v) ** 2)
        for _ in range(20):
            y = rng.normal(size=d)
            y = y / max(np.sum(np.abs(y)) / radius, 1.0)
            assert dist <= np.sum((y - v) ** 2) + 1e-9


def test_berhu_ball_prox_unconstrained_when_feasible():
    rng = np.random.default_rng(4)
    for _ in range(20):
        v = rng.normal(size=5) * 0.2
        c = float(rng.uniform(0.05, 0.5))
        free = berhu_prox(v, c)
        if np.sum(np.abs(free)) <= 1.0:
            np.testing.assert_allclose(_berhu_ball_prox(v, c, 1.0), free, atol=1e-12)


def test_berhu_ball_prox_matches_2d_grid():
    rng = np.random.default_rng(5)
    for _ in range(15):
        v = rng.normal(size=2) * 3
        c = float(rng.uniform(0.0, 1.0))
        radius = float(rng.uniform(0.3, 1.5))

        def objective(cand):
            vals = 0.5 * np.sum((cand - v[:, None]) ** 2, axis=0)
            vals = vals + c * np.sum(berhu_penalty(cand), axis=0)
            bad = np.sum(np.abs(cand), axis=0) > radius + 1e-12
            return np.where(bad, np.inf, vals)

        _, f_star = refine_grid_min(objective, [(-radius, radius)] * 2)
        x = _berhu_ball_prox(v, c, radius)
        assert np.sum(np.abs(x)) <= radius + 1e-9
        f = 0.5 * np.sum((x - v) ** 2) + c * np.sum(berhu_penalty(x))
        assert f <= f_star + 1e-3


def test_berhu_ball_prox_ties_and_degenerate():
    # equal magnitudes force multiplier ties across breakpoints
    x = _berhu_ball_prox(np.array([2.0, -2.0, 2.0]), 0.25, 1.0)
    assert np.sum(np.abs(x)) <= 1.0 + 1e-9
    np.testing.assert_array_equal(
        _berhu_ball_prox(np.zeros(4), 0.3, 1.0), np.zeros(4)
    )


def test_penalty_validation():
    with pytest.raises(ValueError):
        Penalty("ridge", 0.1)
    with pytest.raises(ValueError):
        Penalty("l1", -0.5)
    with pytest.raises(ValueError):
        Penalty("none", 0.5)
    assert Penalty().value(np.array([1.0, 2.0])) == 0.0
    assert Penalty("l1", 2.0).value(np.array([1.0, -2.0])) == pytest.approx(6.0)
    assert Penalty("perspective", 0.5).value(np.array([0.5, 2.0])) == pytest.approx(3.0)


def test_row_problem_validation():
    rng = np.random.default_rng(6)
    h = rng.normal(size=(4, 3))
    with pytest.raises(ValueError):
        RowProblem(h, rng.normal(size=4), n_state=2, match_weight=0.0)
    with pytest.raises(ValueError):
        RowProblem(h, rng.normal(size=3), n_state=2, match_weight=1.0)
    with pytest.raises(ValueError):
        RowProblem(
            h, rng.normal(size=4), n_state=2, match_weight=1.0, ball_radius=1.5
        )
    with pytest.raises(ValueError):
        RowProblem(h, rng.normal(size=4), n_state=2, match_weight=1.0, mode="dual")


def test_gram_norm_matches_eigensolver():
    rng = np.random.default_rng(7)
    for _ in range(10):
        h = rng.normal(size=(12, 5))
        expected = float(np.max(np.linalg.eigvalsh(h.T @ h)))
        np.testing.assert_allclose(gram_norm(h, seed=0), expected, rtol=1e-4)


def test_solve_row_feasible_point_bound():
    rng = np.random.default_rng(8)
    for trial in range(10):
        h = rng.normal(size=(12, 5))
        w_true = rng.normal(size=5)
        w_true[:3] = project_l1_ball(w_true[:3], 0.9)
        problem = RowProblem(
            h,
            h @ w_true,
            n_state=3,
            match_weight=1.0,
            ball_radius=0.9,
        )
        sol = solve_row(problem, TIGHT)
        assert row_objective(problem, sol.w) <= row_objective(problem, w_true) + 1e-8
        assert np.sum(np.abs(sol.w[:3])) <= 0.9 + 1e-9


def test_solve_row_l1_matches_grid_2d():
    rng = np.random.default_rng(9)
    for _ in range(8):
        h = rng.normal(size=(6, 2))
        target = rng.normal(size=6)
        beta = float(rng.uniform(0.05, 0.8))
        problem = RowProblem(
            h,
            target,
            n_state=2,
            match_weight=1.0,
            penalty=Penalty("l1", beta),
        )
        sol = solve_row(problem, TIGHT)
        objective = row_objective_fn(
            h, target, 1.0, lambda c: beta * np.sum(np.abs(c), axis=0), None, 2
        )
        _, f_star = refine_grid_min(objective, [(-3, 3)] * 2)
        assert row_objective(problem, sol.w) <= f_star + 1e-3


def test_solve_row_perspective_matches_grid_2d():
    rng = np.random.default_rng(10)
    for _ in range(8):
        h = rng.normal(size=(6, 2))
        target = rng.normal(size=6)
        alpha = float(rng.uniform(0.05, 0.6))
        problem = RowProblem(
            h,
            target,
            n_state=2,
            match_weight=1.0,
            penalty=Penalty("perspective", alpha),
            ball_radius=0.8,
        )
        sol = solve_row(problem, TIGHT)
        objective = row_objective_fn(
            h,
            target,
            1.0,
            lambda c: alpha * np.sum(berhu_penalty(c), axis=0),
            0.8,
            2,
        )
        _, f_star = refine_grid_min(objective, [(-0.8, 0.8)] * 2)
        assert row_objective(problem, sol.w) <= f_star + 1e-3


def test_solve_row_perspective_sparsifies():
    rng = np.random.default_rng(11)
    h = rng.normal(size=(30, 10))
    target = h @ (rng.normal(size=10) * 0.1) + 0.05 * rng.normal(size=30)
    base = RowProblem(h, target, n_state=6, match_weight=1.0)
    heavy = RowProblem(
        h,
        target,
        n_state=6,
        match_weight=1.0,
        penalty=Penalty("perspective", 2.0),
    )
    free = solve_row(base, TIGHT)
    sparse = solve_row(heavy, TIGHT)
    assert sparse.nnz < free.nnz


def test_solve_row_ball_constraint_satisfied():
    rng = np.random.default_rng(12)
    for trial in range(10):
        h = rng.normal(size=(15, 7))
        target = rng.normal(size=15) * 2
        kind = ("l1", "perspective")[trial % 2]
        problem = RowProblem(
            h,
            target,
            n_state=4,
            match_weight=1.0,
            penalty=Penalty(kind, 0.1),
            ball_radius=0.99,
        )
        sol = solve_row(problem, TIGHT)
        assert np.sum(np.abs(sol.w[:4])) <= 0.99 + 1e-9


def test_solve_row_match_weight_monotonicity():
    rng = np.random.default_rng(13)
    h = rng.normal(size=(20, 6))
    target = rng.normal(size=20)
    residuals = []
    for mw in (0.5, 1.0, 2.0, 4.0):
        problem = RowProblem(
            h,
            target,
            n_state=3,
            match_weight=mw,
            penalty=Penalty("l1", 0.3),
        )
        sol = solve_row(problem, TIGHT)
        residuals.append(float(np.linalg.norm(h @ sol.w - target)))
    for lo, hi in zip(residuals[1:], residuals[:-1]):
        assert lo <= hi + 1e-6


def test_solve_row_deterministic():
    rng = np.random.default_rng(14)
    h = rng.normal(size=(10, 4))
    target = rng.normal(size=10)

    def run():
        problem = RowProblem(
            h.copy(),
            target.copy(),
            n_state=2,
            match_weight=1.0,
            penalty=Penalty("perspective", 0.2),
            ball_radius=0.9,
        )
        return solve_row(problem, SolverConfig(seed=3))

    a, b = run(), run()
    assert (a.w == b.w).all()
    assert a.iterations == b.iterations
    assert a.objective == b.objective


def test_solve_row_exact_mode_consistent_target():
    # mirrors trainer usage: consistent targets with a min-norm warm start
    rng = np.random.default_rng(15)
    for _ in range(5):
        h = rng.normal(size=(8, 12))
        target = h @ (0.05 * rng.normal(size=12))
        warm = np.linalg.lstsq(h, target, rcond=None)[0]
        assert np.sum(np.abs(warm[:6])) < 0.9
        problem = RowProblem(
            h,
            target,
            n_state=6,
            match_weight=1.0,
            ball_radius=0.9,
            mode="exact",
            warm_start=warm,
        )
        sol = solve_row(problem)
        assert sol.match_residual <= EXACT_MATCH_TOL
        assert np.max(np.abs(h @ sol.w - target)) <= EXACT_MATCH_TOL


def test_solve_row_exact_mode_penalized_ladder():
    rng = np.random.default_rng(16)
    h = rng.normal(size=(6, 10))
    w_true = rng.normal(size=10) * 0.5
    problem = RowProblem(
        h,
        h @ w_true,
        n_state=5,
        match_weight=1.0,
        penalty=Penalty("l1", 0.01),
        mode="exact",
    )
    sol = solve_row(problem)
    assert sol.match_residual <= EXACT_MATCH_TOL


def test_solve_row_exact_mode_rejects_inconsistent_target():
    rng = np.random.default_rng(17)
    h = rng.normal(size=(8, 3))
    target = rng.normal(size=8) * 3
    problem = RowProblem(h, target, n_state=2, match_weight=1.0, mode="exact")
    with pytest.raises(RowSolverError, match="not consistent"):
        solve_row(problem)


def test_solve_row_error_carries_partial_solution():
    rng = np.random.default_rng(18)
    h = rng.normal(size=(10, 4))
    problem = RowProblem(
        h,
        rng.normal(size=10),
        n_state=2,
        match_weight=1.0,
        penalty=Penalty("l1", 0.1),
    )
    with pytest.raises(RowSolverError) as err:
        solve_row(problem, SolverConfig(max_iter=2))
    assert isinstance(err.value.solution, RowSolution)
    assert err.value.solution.w.shape == (4,)


def test_solve_row_warm_start_agrees_with_cold():
    rng = np.random.default_rng(19)
    h = rng.normal(size=(12, 5))
    target = rng.normal(size=12)
    cold = solve_row(
        RowProblem(h, target, n_state=3, match_weight=1.0, penalty=Penalty("l1", 0.2)),
        TIGHT,
    )
    warm = solve_row(
        RowProblem(
            h,
            target,
            n_state=3,
            match_weight=1.0,
            penalty=Penalty("l1", 0.2),
            warm_start=rng.normal(size=5),
        ),
        TIGHT,
    )
    np.testing.assert_allclose(warm.w, cold.w, atol=1e-6)


def test_prox_produces_exact_zeros():
    rng = np.random.default_rng(20)
    h = rng.normal(size=(25, 8))
    target = 0.02 * rng.normal(size=25)
    problem = RowProblem(
        h,
        target,
        n_state=4,
        match_weight=1.0,
        penalty=Penalty("l1", 1.0),
    )
    sol = solve_row(problem, TIGHT)
    assert (sol.w == 0.0).sum() >= 6
