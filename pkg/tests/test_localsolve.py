import math

import numpy as np
import pytest

from src.errors import NeighborhoodInfeasibleError
from src.localsolve import (
    STATUS_CONVERGED,
    STATUS_INFEASIBLE,
    ConstrainedProgram,
    SolverSettings,
    phase1,
    primal_value,
    solve,
    solve_neighborhood,
)
from src.model import BarrierSpec, NodeProblem, RhsShare, SmoothConvexFn, barrier_objective

TINY_C = BarrierSpec(kind="log", c=1e-8)


def scalar_node(node_id=0, a=1.0, lin=0.0, lower=-1.0, upper=1.0, m_in=0, m_eq=1):
    """``a x^2 + lin x`` on ``(lower, upper)`` with ``m_in``/``m_eq`` unit coupling rows."""
    return NodeProblem(
        id=node_id,
        objective=SmoothConvexFn.quadratic([[a]], [lin], 0.0),
        local_constraints=(
            SmoothConvexFn.affine([1.0], -upper),
            SmoothConvexFn.affine([-1.0], lower),
        ),
        A_in=np.ones((m_in, 1)),
        A_eq=np.ones((m_eq, 1)),
    )


def shifted_node(center, lower, upper, m_in=1, node_id=0):
    """``(x - center)^2`` on ``(lower, upper)`` with one unit inequality row."""
    return NodeProblem(
        id=node_id,
        objective=SmoothConvexFn.quadratic([[1.0]], [-2.0 * center], center**2),
        local_constraints=(
            SmoothConvexFn.affine([1.0], -upper),
            SmoothConvexFn.affine([-1.0], lower),
        ),
        A_in=np.ones((m_in, 1)),
        A_eq=np.zeros((0, 1)),
    )


def program_for(node, barrier=TINY_C, rhs_in=(), rhs_eq=()):
    return ConstrainedProgram.for_nodes([node], barrier, np.array(rhs_in, float), np.array(rhs_eq, float))


# Settings


def test_settings_reject_bad_constants():
    with pytest.raises(ValueError, match="mu_shrink"):
        SolverSettings(mu_shrink=1.0)
    with pytest.raises(ValueError, match="backtrack"):
        SolverSettings(backtrack=0.0)
    with pytest.raises(ValueError, match="max_newton_iters"):
        SolverSettings(max_newton_iters=0)


def test_program_rejects_rhs_size_mismatch():
    with pytest.raises(ValueError, match="do not match"):
        program_for(scalar_node(), rhs_eq=[1.0, 2.0])


# Phase I


def test_phase1_equality_pins_the_point():
    result = phase1(program_for(scalar_node(), rhs_eq=[0.5]))
    assert result.feasible
    assert result.x[0] == pytest.approx(0.5)


def test_phase1_detects_infeasible_equality():
    node = scalar_node(lower=0.0, upper=1.0)
    result = phase1(program_for(node, rhs_eq=[2.0]))
    assert not result.feasible
    assert result.status == STATUS_INFEASIBLE
    assert result.x is None


def test_phase1_two_node_dispatch_neighborhood():
    nodes = [scalar_node(0, lower=0.0, upper=2.0), scalar_node(1, a=2.0, lower=0.0, upper=2.0)]
    program = ConstrainedProgram.for_nodes(nodes, TINY_C, np.zeros(0), np.array([3.0]))
    result = phase1(program)
    assert result.feasible
    assert program.is_strictly_feasible(result.x)
    assert float(np.min(-program.local_values(result.x))) > 0
    assert result.x.sum() == pytest.approx(3.0)


def test_phase1_inequality_rows_keep_positive_slack():
    node = shifted_node(1.0, -2.0, 2.0)
    program = program_for(node, rhs_in=[0.3])
    result = phase1(program)
    assert result.feasible
    assert program.slack(result.x)[0] > 0


def test_phase1_inequality_rows_infeasible():
    node = shifted_node(1.0, 0.0, 2.0)
    result = phase1(program_for(node, rhs_in=[-0.5]))
    assert not result.feasible


def test_phase1_unconstrained_program_is_trivially_feasible():
    node = NodeProblem(id=0, objective=SmoothConvexFn.quadratic([[1.0]], [0.0]), A_eq=np.ones((1, 1)))
    result = phase1(program_for(node, rhs_eq=[4.0]))
    assert result.feasible
    assert result.x[0] == pytest.approx(4.0)


# Solve


def test_solve_equality_only_matches_hand_kkt():
    node = scalar_node()
    result = solve(program_for(node, rhs_eq=[0.5]))
    assert result.converged
    assert result.x_star[0] == pytest.approx(0.5, abs=1e-9)
    assert result.value == pytest.approx(0.25, abs=1e-6)
    F = barrier_objective(node, TINY_C)
    assert result.u_eq[0] == pytest.approx(-F.gradient(np.array([0.5]))[0], rel=1e-8)
    assert result.u_eq[0] == pytest.approx(-1.0, abs=1e-6)


def test_solve_inactive_inequality_has_zero_multiplier():
    node = shifted_node(0.0, -1.0, 1.0)
    result = solve(program_for(node, rhs_in=[0.3]))
    assert result.converged
    assert result.x_star[0] == pytest.approx(0.0, abs=1e-6)
    assert result.u_in[0] == pytest.approx(0.0, abs=1e-6)


def test_solve_active_inequality_recovers_multiplier():
    node = shifted_node(1.0, -2.0, 2.0)
    result = solve(program_for(node, rhs_in=[0.3]))
    assert result.converged
    assert result.x_star[0] == pytest.approx(0.3, abs=1e-4)
    assert result.u_in[0] == pytest.approx(1.4, abs=1e-4)
    assert result.mu <= 1e-10


def test_solve_stays_strictly_feasible():
    node = shifted_node(1.0, -2.0, 2.0)
    program = program_for(node, rhs_in=[0.3])
    result = solve(program)
    assert program.slack(result.x_star)[0] > 0
    assert np.all(program.local_values(result.x_star) < 0)


def test_solve_merit_decreases_within_each_stage():
    node = shifted_node(1.0, -2.0, 2.0)
    result = solve(program_for(node, rhs_in=[0.3]))
    for stage in result.merit_trace:
        for before, after in zip(stage, stage[1:]):
            assert after <= before + 1e-12 * (1.0 + abs(before))


def test_solve_infeasible_program():
    result = solve(program_for(scalar_node(lower=0.0, upper=1.0), rhs_eq=[2.0]))
    assert result.status == STATUS_INFEASIBLE
    assert not result.converged
    assert math.isinf(result.value)
    assert result.x_star is None


def test_solve_uses_interior_warm_start():
    node = shifted_node(1.0, -2.0, 2.0)
    program = program_for(node, rhs_in=[0.3])
    cold = solve(program)
    warm = solve(program, x0=np.array([0.0]))
    assert warm.warm_started
    assert not cold.warm_started
    assert warm.x_star[0] == pytest.approx(cold.x_star[0], abs=1e-6)


def test_solve_ignores_exterior_warm_start():
    node = shifted_node(1.0, -2.0, 2.0)
    result = solve(program_for(node, rhs_in=[0.3]), x0=np.array([5.0]))
    assert not result.warm_started
    assert result.converged


# Primal value


def test_primal_value_pins_scalar_dispatch_node():
    node = scalar_node(a=3.0, lin=1.0, lower=0.0, upper=2.0)
    barrier = BarrierSpec(kind="log", c=1e-3)
    result = primal_value(node, barrier, RhsShare(y_in=np.zeros(0), y_eq=np.array([1.0])))
    assert result.converged
    assert result.x_star[0] == pytest.approx(1.0)
    expected = 3.0 + 1.0 + 1e-3 * (-math.log(1.0) - math.log(1.0))
    assert result.value == pytest.approx(expected)


def test_primal_value_with_share_outside_box_is_infeasible():
    node = scalar_node(lower=0.0, upper=2.0)
    result = primal_value(node, TINY_C, RhsShare(y_in=np.zeros(0), y_eq=np.array([3.0])))
    assert result.status == STATUS_INFEASIBLE


def test_primal_value_multiplier_is_negative_share_gradient():
    node = scalar_node(lower=-10.0, upper=10.0)
    result = primal_value(node, TINY_C, RhsShare(y_in=np.zeros(0), y_eq=np.array([1.0])))
    assert result.u_eq[0] == pytest.approx(-2.0, rel=1e-6)


# Neighborhoods


def test_single_node_neighborhood_matches_primal_value():
    node = scalar_node(a=2.0, lower=0.0, upper=2.0)
    barrier = BarrierSpec(kind="log", c=1e-3)
    share = RhsShare(y_in=np.zeros(0), y_eq=np.array([1.2]))
    alone = primal_value(node, barrier, share)
    joint = solve_neighborhood([node], barrier, share.y_in, share.y_eq)
    assert joint.value == pytest.approx(alone.value)
    assert joint.block(0)[0] == pytest.approx(alone.x_star[0])
    np.testing.assert_allclose(joint.multiplier, alone.multiplier, rtol=1e-8)


def test_two_node_neighborhood_equalizes_marginal_costs():
    nodes = [scalar_node(0, a=1.0, lower=-10.0, upper=10.0), scalar_node(1, a=2.0, lower=-10.0, upper=10.0)]
    result = solve_neighborhood(nodes, TINY_C, np.zeros(0), np.array([3.0]))
    assert result.block(0)[0] == pytest.approx(2.0, abs=1e-6)
    assert result.block(1)[0] == pytest.approx(1.0, abs=1e-6)
    assert sum(result.values) == pytest.approx(result.value)


def test_two_node_neighborhood_with_active_bound():
    nodes = [scalar_node(0, a=1.0, lower=0.0, upper=1.8), scalar_node(1, a=2.0, lower=0.0, upper=1.8)]
    result = solve_neighborhood(nodes, TINY_C, np.zeros(0), np.array([3.0]))
    assert result.block(0)[0] == pytest.approx(1.8, abs=1e-3)
    assert result.block(1)[0] == pytest.approx(1.2, abs=1e-3)
    assert result.block(0)[0] < 1.8


def test_neighborhood_with_inequality_rows():
    nodes = [shifted_node(1.0, -2.0, 2.0, node_id=0), shifted_node(1.0, -2.0, 2.0, node_id=1)]
    result = solve_neighborhood(nodes, TINY_C, np.array([1.0]), np.zeros(0))
    assert result.block(0)[0] == pytest.approx(0.5, abs=1e-4)
    assert result.block(1)[0] == pytest.approx(0.5, abs=1e-4)
    assert result.result.u_in[0] == pytest.approx(1.0, abs=1e-3)


def test_infeasible_neighborhood_carries_diagnostics():
    nodes = [scalar_node(0, lower=0.0, upper=1.0), scalar_node(1, lower=0.0, upper=1.0)]
    with pytest.raises(NeighborhoodInfeasibleError) as excinfo:
        solve_neighborhood(nodes, TINY_C, np.zeros(0), np.array([3.0]))
    assert excinfo.value.diagnostics["node_ids"] == [0, 1]
    assert excinfo.value.diagnostics["rhs_eq_sum"] == [3.0]


def test_neighborhood_warm_start_is_used():
    nodes = [scalar_node(0, a=1.0, lower=0.0, upper=3.0), scalar_node(1, a=2.0, lower=0.0, upper=3.0)]
    result = solve_neighborhood(
        nodes, BarrierSpec(c=1e-4), np.zeros(0), np.array([3.0]), warm_start=[np.array([1.5]), np.array([1.5])]
    )
    assert result.result.warm_started
    assert result.result.status == STATUS_CONVERGED


# Randomized programs against brute force

BOX = 3.0
RANDOM_C = BarrierSpec(kind="log", c=1e-6)


def random_program(seed):
    """``(x - m)' Q (x - m)`` on ``(-3, 3)^d`` with one inequality row of slack 0.3 at a random point."""
    rng = np.random.default_rng(seed)
    d = 1 + seed % 2
    basis, _ = np.linalg.qr(rng.normal(size=(d, d)))
    Q = basis @ np.diag(rng.uniform(1.0, 2.0, size=d)) @ basis.T
    Q = 0.5 * (Q + Q.T)
    center = rng.uniform(-0.5, 0.5, size=d)
    row = rng.normal(size=d)
    row *= rng.uniform(0.5, 1.5) / np.linalg.norm(row)
    point = rng.uniform(-0.3, 0.3, size=d)
    rhs = float(row @ point) + 0.3
    node = NodeProblem(
        id=0,
        objective=SmoothConvexFn.quadratic(Q, -2.0 * Q @ center, float(center @ Q @ center)),
        local_constraints=tuple(
            SmoothConvexFn.affine(sign * np.eye(d)[k], -BOX) for k in range(d) for sign in (1, -1)
        ),
        A_in=row.reshape(1, d),
        A_eq=np.zeros((0, d)),
    )
    return node, RhsShare(y_in=np.array([rhs]), y_eq=np.zeros(0))


def barrier_values(node, points):
    """Vectorized ``F`` on the rows of ``points``."""
    Q, q, r = node.objective.Q, node.objective.q, node.objective.r
    quad = np.einsum("ni,ij,nj->n", points, Q, points) + points @ q + r
    barrier = -np.log(BOX - points) - np.log(points + BOX)
    return quad + RANDOM_C.c * barrier.sum(axis=1)


def brute_force_minimum(node, share):
    row, rhs = node.A_in[0], share.y_in[0]
    inner = np.nextafter(BOX, 0.0)
    if node.dim == 1:
        grid = np.arange(-BOX + 1e-3, BOX, 1e-3)
        grid = grid[row[0] * grid <= rhs]
        edge = rhs / row[0]
        candidates = np.concatenate([grid, [edge] if -BOX < edge < BOX else []])
        return float(barrier_values(node, candidates[:, None]).min())

    # Coarse grid, then a fine grid around the coarse winner, plus samples on the coupling line
    axis = np.arange(-BOX + 1e-2, BOX, 1e-2)
    coarse = np.stack(np.meshgrid(axis, axis), axis=-1).reshape(-1, 2)
    coarse = coarse[coarse @ row <= rhs]
    best = coarse[np.argmin(barrier_values(node, coarse))]
    window = np.arange(-0.05, 0.05 + 1e-12, 1e-3)
    fine = best + np.stack(np.meshgrid(window, window), axis=-1).reshape(-1, 2)
    fine = fine[(fine @ row <= rhs) & np.all(np.abs(fine) < inner, axis=1)]

    direction = np.array([-row[1], row[0]]) / np.linalg.norm(row)
    foot = rhs * row / (row @ row)
    line = foot + np.arange(-5.0, 5.0, 1e-3)[:, None] * direction
    line = line[np.all(np.abs(line) < inner, axis=1)]
    candidates = np.vstack([fine, line])
    return float(barrier_values(node, candidates).min())


def assert_kkt_invariants(node, barrier, share, result):
    x = result.x_star
    grad = barrier_objective(node, barrier).gradient(x)
    A = np.vstack([node.A_in, node.A_eq])
    residual = np.linalg.norm(grad + A.T @ result.multiplier)
    assert residual <= 1e-8 * (1.0 + np.linalg.norm(grad))
    assert result.kkt_residual == pytest.approx(residual, abs=1e-12)
    assert np.all(result.u_in >= -1e-10)
    slack = share.y_in - node.A_in @ x
    assert np.all(np.abs(result.u_in * slack) <= 1e-10)
    assert node.is_interior(x)


@pytest.mark.parametrize("seed", range(50))
def test_random_program_matches_grid_minimum(seed):
    node, share = random_program(seed)
    result = primal_value(node, RANDOM_C, share)
    assert result.converged
    assert_kkt_invariants(node, RANDOM_C, share, result)
    brute = brute_force_minimum(node, share)
    assert result.value <= brute + 1e-9
    assert result.value == pytest.approx(brute, abs=1e-5)


def test_active_row_multiplier_satisfies_stationarity():
    node = shifted_node(1.0, -2.0, 2.0)
    barrier = BarrierSpec(kind="log", c=1e-6)
    share = RhsShare(y_in=np.array([0.3]), y_eq=np.zeros(0))
    result = primal_value(node, barrier, share)
    assert result.converged
    slack = 0.3 - result.x_star[0]
    assert slack < 1e-9
    grad = barrier_objective(node, barrier).gradient(result.x_star)[0]
    assert result.u_in[0] == pytest.approx(-grad, rel=1e-12)
    assert_kkt_invariants(node, barrier, share, result)


def test_stiff_local_bound_meets_stationarity():
    nodes = [scalar_node(0, a=1.0, lower=0.0, upper=1.8), scalar_node(1, a=2.0, lower=0.0, upper=1.8)]
    barrier = BarrierSpec(kind="log", c=1e-6)
    result = solve_neighborhood(nodes, barrier, np.zeros(0), np.array([3.0]))
    grad = np.concatenate([barrier_objective(node, barrier).gradient(x) for node, x in zip(nodes, result.blocks)])
    residual = np.linalg.norm(grad + result.multiplier[0])
    assert residual <= 1e-8 * (1.0 + np.linalg.norm(grad))
    assert result.block(0)[0] == pytest.approx(1.8, abs=1e-5)
