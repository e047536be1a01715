"""Centralized reference solutions used to score and test distributed runs."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np

from .errors import OracleError
from .localsolve import DEFAULT_SETTINGS, ConstrainedProgram, SolverSettings, primal_value, solve
from .model import BarrierSpec, NodeProblem, ProblemInstance, RhsShare

logger = logging.getLogger(__name__)

# Barrier weights of the vanishing-c homotopy for the original problem
ORIGINAL_SCHEDULE = (1e-4, 1e-6, 1e-8)
MONOTONE_SLACK = 1e-10


@dataclass(frozen=True)
class OracleSolution:
    """Centralized optimum of the barrier problem or of the original problem."""

    x_star: tuple[np.ndarray, ...]
    value: float
    problem_kind: Literal["barrier", "original"]
    c: float
    sum_f: float
    multiplier: np.ndarray
    kkt_residual: float
    path: tuple[tuple[float, float, float], ...] = ()
    monotone: bool = True


def _full_program(inst: ProblemInstance, barrier: BarrierSpec) -> ConstrainedProgram:
    return ConstrainedProgram.for_nodes(inst.nodes, barrier, inst.coupling.b_in, inst.coupling.b_eq)


def solve_centralized_barrier(
    inst: ProblemInstance,
    c: Optional[float] = None,
    settings: Optional[SolverSettings] = None,
    warm_start: Optional[Sequence[np.ndarray]] = None,
) -> OracleSolution:
    """Solve the whole barrier problem at weight ``c`` (instance weight by default).

    Raises:
        OracleError: If the instance is infeasible or the solve does not converge.
    """
    barrier = inst.barrier if c is None else BarrierSpec(kind=inst.barrier.kind, c=c)
    program = _full_program(inst, barrier)
    x0 = None if warm_start is None else program.join(warm_start)
    result = solve(program, x0, settings or DEFAULT_SETTINGS)
    if not result.converged:
        raise OracleError(f"centralized barrier solve at c={barrier.c:g} ended with status {result.status}")
    logger.debug(f"Centralized F*({barrier.c:g}) = {result.value:.12g} in {result.newton_iters} Newton steps")
    return OracleSolution(
        x_star=tuple(program.split(result.x_star)),
        value=result.value,
        problem_kind="barrier",
        c=barrier.c,
        sum_f=program.f_value(result.x_star),
        multiplier=result.multiplier,
        kkt_residual=result.kkt_residual,
    )


def solve_centralized_original(
    inst: ProblemInstance,
    schedule: Sequence[float] = ORIGINAL_SCHEDULE,
    settings: Optional[SolverSettings] = None,
) -> OracleSolution:
    """Approximate ``f*`` by following the barrier problem as ``c`` vanishes.

    Each weight is warm-started from the previous minimizer. ``value`` is
    ``sum_i f_i(x*)`` at the last weight; ``path`` holds ``(c, F*, sum_f)`` per
    weight and ``monotone`` records whether ``sum_f`` never increased.
    """
    if not schedule:
        raise ValueError("barrier schedule must not be empty")
    path = []
    warm = None
    solution = None
    for c in sorted(schedule, reverse=True):
        solution = solve_centralized_barrier(inst, c, settings, warm)
        warm = solution.x_star
        path.append((c, solution.value, solution.sum_f))
    sums = [entry[2] for entry in path]
    monotone = all(b <= a + MONOTONE_SLACK * (1.0 + abs(a)) for a, b in zip(sums, sums[1:]))
    if not monotone:
        logger.warning(f"sum(f) along the barrier path is not monotone: {sums}")
    return OracleSolution(
        x_star=solution.x_star,
        value=solution.sum_f,
        problem_kind="original",
        c=solution.c,
        sum_f=solution.sum_f,
        multiplier=solution.multiplier,
        kkt_residual=solution.kkt_residual,
        path=tuple(path),
        monotone=monotone,
    )


def barrier_sweep(
    inst: ProblemInstance,
    cs: Sequence[float],
    f_star: float,
    settings: Optional[SolverSettings] = None,
) -> list[dict]:
    """``F*(c)`` and the barrier gap ``sum_f(x*(c)) - f*`` for each ``c``."""
    rows = []
    for c in cs:
        solution = solve_centralized_barrier(inst, c, settings)
        rows.append({"c": c, "F_star": solution.value, "sum_f": solution.sum_f, "gap": solution.sum_f - f_star})
    return rows


def optimal_shares(inst: ProblemInstance, sol: OracleSolution) -> list[RhsShare]:
    """Shares at which the barrier optimum is also every node's own optimum.

    Each node gets ``A_i x_i*`` plus an equal part of the leftover budget, so the
    shares sum to ``b``.
    """
    n = inst.n
    used_in = sum((node.A_in @ x for node, x in zip(inst.nodes, sol.x_star)), np.zeros(inst.m_in))
    used_eq = sum((node.A_eq @ x for node, x in zip(inst.nodes, sol.x_star)), np.zeros(inst.m_eq))
    spare_in = (inst.coupling.b_in - used_in) / n
    spare_eq = (inst.coupling.b_eq - used_eq) / n
    return [
        RhsShare(y_in=node.A_in @ x + spare_in, y_eq=node.A_eq @ x + spare_eq)
        for node, x in zip(inst.nodes, sol.x_star)
    ]


def phi_grad_fd(
    node: NodeProblem,
    barrier: BarrierSpec,
    y: RhsShare,
    h: Optional[float] = None,
    settings: Optional[SolverSettings] = None,
) -> np.ndarray:
    """Central-difference estimate of ``grad phi_i(y)``.

    Args:
        node: The node whose primal function is differentiated.
        barrier: Barrier family and weight.
        y: Share at which to differentiate.
        h: Step; defaults to ``1e-5 * (1 + ||y||)``.
        settings: Solver constants.

    Raises:
        OracleError: If a perturbed share is infeasible.
    """
    stacked = y.stacked
    m_in = y.y_in.shape[0]
    step = 1e-5 * (1.0 + float(np.linalg.norm(stacked))) if h is None else h
    grad = np.zeros_like(stacked)
    for k in range(stacked.shape[0]):
        values = []
        for sign in (1.0, -1.0):
            shifted = stacked.copy()
            shifted[k] += sign * step
            result = primal_value(node, barrier, RhsShare.from_stacked(shifted, m_in), settings=settings)
            if not result.converged:
                raise OracleError(
                    f"node {node.id}: share perturbed along coordinate {k} by {sign * step:+.3e} "
                    f"is {result.status}; use a smaller h"
                )
            values.append(result.value)
        grad[k] = (values[0] - values[1]) / (2.0 * step)
    return grad
