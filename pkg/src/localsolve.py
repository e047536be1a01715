"""Path-following Newton solver for linearly coupled barrier programs.

A program minimizes a block-separable barrier objective ``sum_j F_j(x_j)``
subject to stacked coupling rows ``A_in x <= rhs_in`` and ``A_eq x = rhs_eq``.
Equalities are kept exactly by taking Newton steps in the null space of
``A_eq``; inequality rows get an auxiliary ``-mu * sum(log(s))`` barrier whose
weight is driven to zero while the local barriers keep their fixed weight ``c``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import DomainViolationError, NeighborhoodInfeasibleError, SolverError
from .model import BarrierSpec, CompositeObjective, NodeProblem, RhsShare, barrier_objective, max_feasible_step

logger = logging.getLogger(__name__)

STATUS_CONVERGED = "converged"
STATUS_INFEASIBLE = "infeasible"
STATUS_MAX_ITERS = "max-iters"

# Smallest step tried by the backtracking line search
MIN_STEP = 1e-14
# Relative merit noise tolerated once Newton is in its quadratic regime
ROUNDOFF = 1e-13
# Phase I never needs more stages than this to decide feasibility
MAX_PHASE1_STAGES = 40
# Extra Newton steps taken once the decrement is below tolerance
MAX_POLISH_STEPS = 3


@dataclass(frozen=True)
class SolverSettings:
    """Numerical constants of the path-following solver."""

    mu_init: float = 1.0
    mu_shrink: float = 0.2
    armijo: float = 0.01
    backtrack: float = 0.5
    fraction_to_boundary: float = 0.99
    kkt_tol: float = 1e-9
    stationarity_tol: float = 1e-8
    gap_tol: float = 1e-10
    max_newton_iters: int = 200
    stall_decrement: float = 1e-6
    phase1_tol: float = 1e-9
    phase1_exit: float = -1.0

    def __post_init__(self):
        if not 0 < self.mu_shrink < 1:
            raise ValueError(f"mu_shrink must lie in (0, 1), got {self.mu_shrink}")
        if not 0 < self.backtrack < 1:
            raise ValueError(f"backtrack must lie in (0, 1), got {self.backtrack}")
        if not 0 < self.fraction_to_boundary < 1:
            raise ValueError(f"fraction_to_boundary must lie in (0, 1), got {self.fraction_to_boundary}")
        if self.max_newton_iters < 1:
            raise ValueError("max_newton_iters must be at least 1")


DEFAULT_SETTINGS = SolverSettings()


class ConstrainedProgram:
    """Block-separable barrier objective with stacked linear coupling rows."""

    def __init__(
        self,
        objectives: Sequence[CompositeObjective],
        A_in: np.ndarray,
        A_eq: np.ndarray,
        rhs_in: np.ndarray,
        rhs_eq: np.ndarray,
    ):
        self.objectives = tuple(objectives)
        offsets = np.cumsum([0] + [obj.dim for obj in self.objectives])
        self.slices = tuple(slice(int(a), int(b)) for a, b in zip(offsets[:-1], offsets[1:]))
        self.dim = int(offsets[-1])
        self.A_in = np.asarray(A_in, dtype=float).reshape(-1, self.dim)
        self.A_eq = np.asarray(A_eq, dtype=float).reshape(-1, self.dim)
        self.rhs_in = np.atleast_1d(np.asarray(rhs_in, dtype=float)).reshape(-1)
        self.rhs_eq = np.atleast_1d(np.asarray(rhs_eq, dtype=float)).reshape(-1)
        if self.rhs_in.shape[0] != self.A_in.shape[0] or self.rhs_eq.shape[0] != self.A_eq.shape[0]:
            raise ValueError(
                f"rhs sizes ({self.rhs_in.shape[0]}, {self.rhs_eq.shape[0]}) do not match "
                f"coupling rows ({self.A_in.shape[0]}, {self.A_eq.shape[0]})"
            )
        self._local_counts = [len(obj.node.local_constraints) for obj in self.objectives]
        self.num_local = int(sum(self._local_counts))

    @classmethod
    def for_nodes(
        cls,
        nodes: Sequence[NodeProblem],
        barrier: BarrierSpec,
        rhs_in: np.ndarray,
        rhs_eq: np.ndarray,
    ) -> "ConstrainedProgram":
        """Stack the nodes' coupling rows side by side: ``[A_1 ... A_k] x``."""
        return cls(
            [barrier_objective(node, barrier) for node in nodes],
            np.hstack([node.A_in for node in nodes]),
            np.hstack([node.A_eq for node in nodes]),
            rhs_in,
            rhs_eq,
        )

    @property
    def m_in(self) -> int:
        return self.A_in.shape[0]

    @property
    def m_eq(self) -> int:
        return self.A_eq.shape[0]

    @cached_property
    def null_basis(self) -> np.ndarray:
        """Orthonormal basis of ``null(A_eq)``; identity without equalities."""
        if self.m_eq == 0:
            return np.eye(self.dim)
        return scipy.linalg.null_space(self.A_eq)

    def split(self, x: np.ndarray) -> list[np.ndarray]:
        return [x[s].copy() for s in self.slices]

    def join(self, blocks: Sequence[np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(b, dtype=float).reshape(-1) for b in blocks])

    # Objective

    def value(self, x: np.ndarray) -> float:
        return float(sum(obj.value(x[s]) for obj, s in zip(self.objectives, self.slices)))

    def f_value(self, x: np.ndarray) -> float:
        return float(sum(obj.f_value(x[s]) for obj, s in zip(self.objectives, self.slices)))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return np.concatenate([obj.gradient(x[s]) for obj, s in zip(self.objectives, self.slices)])

    def hessian(self, x: np.ndarray) -> np.ndarray:
        return scipy.linalg.block_diag(*(obj.hessian(x[s]) for obj, s in zip(self.objectives, self.slices)))

    # Local constraints over the stacked variable

    def local_values(self, x: np.ndarray) -> np.ndarray:
        if self.num_local == 0:
            return np.zeros(0)
        return np.concatenate([obj.node.constraint_values(x[s]) for obj, s in zip(self.objectives, self.slices)])

    def local_jacobian(self, x: np.ndarray) -> np.ndarray:
        J = np.zeros((self.num_local, self.dim))
        row = 0
        for obj, s, count in zip(self.objectives, self.slices, self._local_counts):
            J[row : row + count, s] = obj.node.constraint_gradients(x[s])
            row += count
        return J

    def local_curvature(self, d: np.ndarray) -> np.ndarray:
        if self.num_local == 0:
            return np.zeros(0)
        return np.concatenate([obj.node.constraint_curvature(d[s]) for obj, s in zip(self.objectives, self.slices)])

    def local_weighted_hessian(self, weights: np.ndarray) -> np.ndarray:
        H = np.zeros((self.dim, self.dim))
        row = 0
        for obj, s, count in zip(self.objectives, self.slices, self._local_counts):
            H[s, s] = obj.node.weighted_constraint_hessian(weights[row : row + count])
            row += count
        return H

    # Coupling rows

    def slack(self, x: np.ndarray) -> np.ndarray:
        return self.rhs_in - self.A_in @ x

    def equality_residual(self, x: np.ndarray) -> float:
        if self.m_eq == 0:
            return 0.0
        return float(np.linalg.norm(self.A_eq @ x - self.rhs_eq, np.inf))

    def project_onto_equality(self, x: np.ndarray) -> np.ndarray:
        """Minimum-norm correction so that ``A_eq x = rhs_eq``."""
        if self.m_eq == 0:
            return x
        correction = scipy.linalg.lstsq(self.A_eq, self.rhs_eq - self.A_eq @ x)[0]
        return x + correction

    def is_strictly_feasible(self, x: np.ndarray, eq_tol: float = 1e-9) -> bool:
        if not np.all(np.isfinite(x)):
            return False
        if np.any(self.local_values(x) >= 0) or np.any(self.slack(x) <= 0):
            return False
        return self.equality_residual(x) <= eq_tol * (1.0 + float(np.abs(self.rhs_eq).max(initial=0.0)))

    # Merit of one centering stage: F(x) - mu * sum(log(s))

    def merit(self, x: np.ndarray, mu: float) -> float:
        value = self.value(x)
        if self.m_in == 0:
            return value
        s = self.slack(x)
        if np.any(s <= 0):
            raise DomainViolationError(f"coupling slack left the interior (min s = {float(s.min()):.3e})")
        return value - mu * float(np.sum(np.log(s)))

    def merit_gradient(self, x: np.ndarray, mu: float) -> np.ndarray:
        g = self.gradient(x)
        if self.m_in == 0:
            return g
        return g + mu * (self.A_in.T @ (1.0 / self.slack(x)))

    def merit_hessian(self, x: np.ndarray, mu: float) -> np.ndarray:
        H = self.hessian(x)
        if self.m_in == 0:
            return H
        s = self.slack(x)
        return H + mu * (self.A_in.T * (1.0 / s**2)) @ self.A_in

    def max_step(self, x: np.ndarray, d: np.ndarray) -> float:
        """Largest step keeping every local constraint and every slack strictly interior."""
        g0 = np.concatenate([self.local_values(x), -self.slack(x)])
        g1 = np.concatenate([self.local_jacobian(x) @ d, self.A_in @ d])
        g2 = np.concatenate([self.local_curvature(d), np.zeros(self.m_in)])
        return max_feasible_step(g0, g1, g2)


@dataclass(frozen=True)
class SubproblemResult:
    """Minimizer, optimal value and geometric multiplier of a solve.

    ``multiplier`` stacks ``(u_in, u_eq)`` with the sign convention
    ``grad F(x*) + A' u = 0``, so ``grad phi(y) = -u``.
    """

    x_star: Optional[np.ndarray]
    value: float
    multiplier: np.ndarray
    kkt_residual: float
    newton_iters: int
    status: str
    m_in: int = 0
    mu: float = 0.0
    merit_trace: tuple[tuple[float, ...], ...] = ()
    warm_started: bool = False

    @property
    def converged(self) -> bool:
        return self.status == STATUS_CONVERGED

    @property
    def u_in(self) -> np.ndarray:
        return self.multiplier[: self.m_in]

    @property
    def u_eq(self) -> np.ndarray:
        return self.multiplier[self.m_in :]


@dataclass(frozen=True)
class Phase1Result:
    """Strictly feasible start, or the minimized infeasibility ``t``."""

    x: Optional[np.ndarray]
    t: float
    status: str
    newton_iters: int = 0

    @property
    def feasible(self) -> bool:
        return self.status != STATUS_INFEASIBLE


@dataclass
class _Centering:
    x: np.ndarray
    iters: int
    converged: bool
    decrement: float
    trace: list[float] = field(default_factory=list)
    stopped_early: bool = False


def _newton_direction(grad: np.ndarray, hess: np.ndarray, Z: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Null-space Newton step, its decrement and the reduced gradient norm."""
    g_r = Z.T @ grad
    if g_r.size == 0:
        return np.zeros_like(grad), 0.0, 0.0
    H_r = Z.T @ hess @ Z
    try:
        v = scipy.linalg.solve(H_r, -g_r, assume_a="sym", check_finite=False)
    except (scipy.linalg.LinAlgError, ValueError):
        v = scipy.linalg.lstsq(H_r, -g_r)[0]
    d = Z @ v
    decrement = math.sqrt(max(float(-grad @ d), 0.0))
    return d, decrement, float(np.linalg.norm(g_r))


def _center(
    merit: Callable[[np.ndarray], float],
    gradient: Callable[[np.ndarray], np.ndarray],
    hessian: Callable[[np.ndarray], np.ndarray],
    max_step: Callable[[np.ndarray, np.ndarray], float],
    x: np.ndarray,
    Z: np.ndarray,
    settings: SolverSettings,
    stop_when: Optional[Callable[[np.ndarray], bool]] = None,
) -> _Centering:
    """Damped Newton on one merit function from a strictly interior start."""
    value = merit(x)
    trace = [value]
    decrement = math.inf
    polish = 0
    for it in range(settings.max_newton_iters):
        g = gradient(x)
        d, decrement, reduced = _newton_direction(g, hessian(x), Z)
        if reduced <= settings.kkt_tol * (1.0 + float(np.linalg.norm(g))):
            return _Centering(x, it, True, decrement, trace)
        if decrement <= settings.kkt_tol:
            # A small decrement can hide a large gradient along stiff directions
            if polish == MAX_POLISH_STEPS:
                return _Centering(x, it, True, decrement, trace)
            polish += 1

        slack = 0.0 if decrement > settings.stall_decrement else ROUNDOFF * (1.0 + abs(value))
        alpha = min(1.0, settings.fraction_to_boundary * max_step(x, d))
        accepted = False
        while alpha > MIN_STEP:
            candidate = x + alpha * d
            try:
                new_value = merit(candidate)
            except DomainViolationError:
                new_value = math.inf
            if new_value <= value - settings.armijo * alpha * decrement**2 + slack:
                accepted = True
                break
            alpha *= settings.backtrack
        if not accepted:
            # Line search stalled: only acceptable once the decrement is negligible
            return _Centering(x, it, decrement <= settings.stall_decrement, decrement, trace)

        x, value = candidate, new_value
        trace.append(value)
        if stop_when is not None and stop_when(x):
            return _Centering(x, it + 1, True, decrement, trace, stopped_early=True)
    return _Centering(x, settings.max_newton_iters, False, decrement, trace)


def phase1(program: ConstrainedProgram, settings: Optional[SolverSettings] = None) -> Phase1Result:
    """Find a strictly feasible point or certify that none exists.

    Minimizes ``t`` over ``(x, t)`` with ``g_j(x) < t`` and ``A_in x - rhs_in < t``
    by the same path-following scheme, starting from the minimum-norm solution
    of the equalities. The point returned satisfies the equalities exactly,
    every ``g_j < 0`` and every slack ``> 0``.
    """
    settings = settings or DEFAULT_SETTINGS
    D = program.dim
    x0 = program.project_onto_equality(np.zeros(D))
    if program.equality_residual(x0) > settings.phase1_tol * (1.0 + float(np.abs(program.rhs_eq).max(initial=0.0))):
        logger.debug("Phase I: equality system is inconsistent")
        return Phase1Result(None, math.inf, STATUS_INFEASIBLE)
    if program.num_local == 0 and program.m_in == 0:
        return Phase1Result(x0, -math.inf, STATUS_CONVERGED)

    def constraints(z: np.ndarray) -> np.ndarray:
        x, t = z[:D], z[D]
        return np.concatenate([program.local_values(x), -program.slack(x)]) - t

    def jacobian(z: np.ndarray) -> np.ndarray:
        J = np.vstack([program.local_jacobian(z[:D]), program.A_in])
        return np.hstack([J, -np.ones((J.shape[0], 1))])

    def merit(z: np.ndarray, mu: float) -> float:
        h = constraints(z)
        if np.any(h >= 0):
            raise DomainViolationError("phase I iterate left its domain")
        return float(z[D] - mu * np.sum(np.log(-h)))

    def gradient(z: np.ndarray, mu: float) -> np.ndarray:
        w = 1.0 / -constraints(z)
        g = mu * (jacobian(z).T @ w)
        g[D] += 1.0
        return g

    def hessian(z: np.ndarray, mu: float) -> np.ndarray:
        w = 1.0 / -constraints(z)
        J = jacobian(z)
        H = mu * (J.T * w**2) @ J
        H[:D, :D] += mu * program.local_weighted_hessian(w[: program.num_local])
        return H

    def max_step(z: np.ndarray, d: np.ndarray) -> float:
        g2 = np.concatenate([program.local_curvature(d[:D]), np.zeros(program.m_in)])
        return max_feasible_step(constraints(z), jacobian(z) @ d, g2)

    basis = program.null_basis
    Z = np.zeros((D + 1, basis.shape[1] + 1))
    Z[:D, : basis.shape[1]] = basis
    Z[D, -1] = 1.0

    h0 = constraints(np.concatenate([x0, [0.0]]))
    z = np.concatenate([x0, [float(h0.max()) + 1.0]])
    count = len(h0)
    mu = settings.mu_init
    iters = 0
    for stage in range(MAX_PHASE1_STAGES):
        centered = _center(
            lambda v: merit(v, mu),
            lambda v: gradient(v, mu),
            lambda v: hessian(v, mu),
            max_step,
            z,
            Z,
            settings,
            stop_when=lambda v: v[D] <= settings.phase1_exit,
        )
        z = centered.x
        iters += centered.iters
        if centered.stopped_early or z[D] < -settings.phase1_tol:
            break
        if mu * count <= settings.gap_tol:
            break
        mu *= settings.mu_shrink

    t = float(z[D])
    if t >= -settings.phase1_tol:
        logger.debug(f"Phase I: no strictly feasible point (min t = {t:.3e})")
        return Phase1Result(None, t, STATUS_INFEASIBLE, iters)

    x = z[:D]
    projected = program.project_onto_equality(x)
    if program.is_strictly_feasible(projected):
        x = projected
    logger.debug(f"Phase I: feasible after {iters} Newton steps (t = {t:.3e})")
    return Phase1Result(x, t, STATUS_CONVERGED, iters)


def _multipliers(program: ConstrainedProgram, x: np.ndarray, mu: float) -> tuple[np.ndarray, float, float]:
    """Geometric multiplier at ``x`` with its stationarity residual and ``||grad F(x)||``.

    Inequality rows start from the central-path estimate ``u_in = mu / s``. Rows
    with ``s**2 <= mu`` are active: ``mu / s`` carries the error of a slack that
    sits within a few ulps of zero, so their multipliers are refitted jointly
    with ``u_eq`` by least squares on ``grad F + A' u = 0``.
    """
    grad = program.gradient(x)
    u_in = np.zeros(0)
    active = np.zeros(0, dtype=bool)
    if program.m_in:
        s = program.slack(x)
        u_in = mu / s
        active = s**2 <= mu
    rows = np.vstack([program.A_in[active], program.A_eq])
    u_eq = np.zeros(0)
    if rows.shape[0]:
        fixed = grad + program.A_in[~active].T @ u_in[~active]
        fitted = scipy.linalg.lstsq(rows.T, -fixed)[0]
        n_active = int(active.sum())
        u_in[active] = np.maximum(fitted[:n_active], 0.0)
        u_eq = fitted[n_active:]
    residual = grad + program.A_in.T @ u_in + program.A_eq.T @ u_eq
    return np.concatenate([u_in, u_eq]), float(np.linalg.norm(residual)), float(np.linalg.norm(grad))


def _roundoff_floor(program: ConstrainedProgram, x: np.ndarray) -> float:
    """Stationarity residual attributable to representing ``x`` in floating point."""
    curvature = float(np.linalg.norm(program.hessian(x), 2)) if program.dim else 0.0
    return float(np.finfo(float).eps) * curvature * (1.0 + float(np.linalg.norm(x, np.inf)))


def _infeasible(program: ConstrainedProgram, iters: int = 0) -> SubproblemResult:
    return SubproblemResult(
        x_star=None,
        value=math.inf,
        multiplier=np.full(program.m_in + program.m_eq, np.nan),
        kkt_residual=math.inf,
        newton_iters=iters,
        status=STATUS_INFEASIBLE,
        m_in=program.m_in,
    )


def solve(
    program: ConstrainedProgram,
    x0: Optional[np.ndarray] = None,
    settings: Optional[SolverSettings] = None,
) -> SubproblemResult:
    """Minimize the program by primal path-following.

    Args:
        program: The program to solve.
        x0: Optional warm start. It is projected onto the equalities and used
            when strictly feasible; otherwise phase I supplies the start.
        settings: Solver constants.

    Returns:
        SubproblemResult. ``status`` is ``infeasible`` when phase I fails and
        ``max-iters`` when the last centering stage did not converge or the
        stationarity residual exceeds ``stationarity_tol * (1 + ||grad F||)``.
    """
    settings = settings or DEFAULT_SETTINGS
    x = None
    warm = False
    if x0 is not None:
        candidate = program.project_onto_equality(np.asarray(x0, dtype=float).reshape(-1))
        if program.is_strictly_feasible(candidate):
            x, warm = candidate, True
        else:
            logger.debug("Warm start is not strictly interior; falling back to phase I")
    phase1_iters = 0
    if x is None:
        start = phase1(program, settings)
        phase1_iters = start.newton_iters
        if not start.feasible:
            return _infeasible(program, phase1_iters)
        x = start.x

    m_in = program.m_in
    mu = 0.0
    if m_in:
        mu = settings.mu_init
        if warm:
            floor = settings.gap_tol / m_in
            mu = float(np.clip(np.mean(program.slack(x)), floor, settings.mu_init))

    Z = program.null_basis
    traces = []
    iters = phase1_iters
    while True:
        centered = _center(
            lambda v: program.merit(v, mu),
            lambda v: program.merit_gradient(v, mu),
            lambda v: program.merit_hessian(v, mu),
            program.max_step,
            x,
            Z,
            settings,
        )
        x = centered.x
        iters += centered.iters
        traces.append(tuple(centered.trace))
        if not centered.converged:
            logger.debug(f"Centering at mu={mu:.3e} stopped with decrement {centered.decrement:.3e}")
        if m_in == 0 or m_in * mu <= settings.gap_tol:
            break
        mu *= settings.mu_shrink

    multiplier, residual, grad_norm = _multipliers(program, x, mu)
    bound = max(settings.stationarity_tol * (1.0 + grad_norm), _roundoff_floor(program, x))
    status = STATUS_CONVERGED
    if not centered.converged:
        status = STATUS_MAX_ITERS
    elif residual > bound:
        logger.debug(f"Stationarity residual {residual:.3e} exceeds {bound:.3e} at mu={mu:.3e}")
        status = STATUS_MAX_ITERS
    return SubproblemResult(
        x_star=x,
        value=program.value(x),
        multiplier=multiplier,
        kkt_residual=residual,
        newton_iters=iters,
        status=status,
        m_in=m_in,
        mu=mu,
        merit_trace=tuple(traces),
        warm_started=warm,
    )


def primal_value(
    node: NodeProblem,
    barrier: BarrierSpec,
    y: RhsShare,
    x0: Optional[np.ndarray] = None,
    settings: Optional[SolverSettings] = None,
) -> SubproblemResult:
    """Evaluate ``phi_i(y_i)``: node ``i`` alone with rhs ``y_i``."""
    program = ConstrainedProgram.for_nodes([node], barrier, y.y_in, y.y_eq)
    return solve(program, x0, settings)


@dataclass(frozen=True)
class NeighborhoodResult:
    """Joint minimizers of a closed neighborhood and its shared multiplier."""

    node_ids: tuple[int, ...]
    blocks: tuple[np.ndarray, ...]
    multiplier: np.ndarray
    value: float
    values: tuple[float, ...]
    result: SubproblemResult

    def block(self, node_id: int) -> np.ndarray:
        return self.blocks[self.node_ids.index(node_id)]


def solve_neighborhood(
    nodes: Sequence[NodeProblem],
    barrier: BarrierSpec,
    rhs_in_sum: np.ndarray,
    rhs_eq_sum: np.ndarray,
    warm_start: Optional[Sequence[np.ndarray]] = None,
    settings: Optional[SolverSettings] = None,
) -> NeighborhoodResult:
    """Jointly reallocate within a closed neighborhood.

    Raises:
        NeighborhoodInfeasibleError: If the summed shares admit no strictly
            feasible point.
        SolverError: If the solve did not converge.
    """
    program = ConstrainedProgram.for_nodes(nodes, barrier, rhs_in_sum, rhs_eq_sum)
    x0 = None if warm_start is None else program.join(warm_start)
    result = solve(program, x0, settings)
    node_ids = tuple(node.id for node in nodes)

    if result.status == STATUS_INFEASIBLE:
        raise NeighborhoodInfeasibleError(
            f"neighborhood {list(node_ids)} has no strictly feasible point",
            diagnostics={
                "node_ids": list(node_ids),
                "rhs_in_sum": np.asarray(rhs_in_sum).tolist(),
                "rhs_eq_sum": np.asarray(rhs_eq_sum).tolist(),
                "warm_start": None if x0 is None else x0.tolist(),
            },
        )
    if result.status != STATUS_CONVERGED:
        raise SolverError(
            f"neighborhood {list(node_ids)} solve stopped after {result.newton_iters} Newton steps",
            result,
        )

    blocks = tuple(program.split(result.x_star))
    values = tuple(obj.value(b) for obj, b in zip(program.objectives, blocks))
    return NeighborhoodResult(
        node_ids=node_ids,
        blocks=blocks,
        multiplier=result.multiplier,
        value=result.value,
        values=values,
        result=result,
    )
