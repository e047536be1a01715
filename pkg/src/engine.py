"""Distributed resource reallocation: initialization, leader steps and audits.

Every node holds a share ``y_i`` of the coupling budget and the minimizer
``x_i`` of its own subproblem at that share. In each iteration a conflict-free
set of leaders is chosen; each leader jointly re-solves its closed neighborhood
with the neighborhood's pooled shares and hands the shares back so that every
member keeps an equal part of the leftover slack. Shares always sum to ``b`` and
every ``x_i`` stays strictly interior, so every iterate is feasible.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Literal, Optional, Sequence, Union

import numpy as np

from .errors import InitializationError, NeighborhoodInfeasibleError, SolverError
from .localsolve import (
    DEFAULT_SETTINGS,
    ConstrainedProgram,
    SolverSettings,
    phase1,
    primal_value,
    solve_neighborhood,
)
from .model import (
    FAMILY_DISPATCH,
    FAMILY_MULTI_RESOURCE,
    CheckResult,
    ProblemInstance,
    RhsShare,
    ValidationReport,
)
from .network import UpdateSet, UpdateSetProvider, VotingSelector, voting_message_count

__all__ = [
    "EngineState",
    "IterationRecord",
    "ReallocationEngine",
    "RhsShare",
    "RunResult",
    "StopRule",
]

logger = logging.getLogger(__name__)

# Audit and monitoring tolerances
COUPLING_TOL = 1e-8
CONSERVATION_TOL = 1e-10
SHARE_TOL = 1e-9
CONSISTENCY_TOL = 1e-8
MONOTONE_TOL = 1e-8
RESIDUAL_FLOOR = -1e-8

# Shares are re-balanced against b this often
RENORMALIZE_EVERY = 1000

# Spread of the two-resource starting shares around their mean lower bound
MULTI_RESOURCE_SPREAD = 0.01

InitStrategy = Literal["even", "from-point"]


@dataclass(frozen=True)
class EngineState:
    """Iterate ``k``: allocations, shares and cached primal values and multipliers."""

    k: int
    x: tuple[np.ndarray, ...]
    y: tuple[RhsShare, ...]
    phi: np.ndarray
    u: tuple[np.ndarray, ...]

    @property
    def n(self) -> int:
        return len(self.x)


@dataclass(frozen=True)
class IterationRecord:
    """Metrics of one iterate."""

    k: int
    update_set: UpdateSet
    sum_f: float
    sum_F: float
    sum_phi: float
    feas_in_err: float
    feas_eq_err: float
    residual_sum: Optional[float] = None
    wallclock_ms: float = 0.0
    messages: int = 0

    @property
    def num_leaders(self) -> int:
        return len(self.update_set)


@dataclass(frozen=True)
class StopRule:
    """When a run may end before ``max_iters``.

    ``none`` runs the full budget, ``residual`` stops once every ``r_i <= tol``
    and ``plateau`` stops once ``sum_phi`` moved by at most
    ``tol * (1 + |sum_phi|)`` over the last ``window`` iterations.
    """

    kind: Literal["none", "residual", "plateau"] = "none"
    tol: float = 0.0
    window: int = 50

    def __post_init__(self):
        if self.kind not in ("none", "residual", "plateau"):
            raise ValueError(f"unknown stop rule {self.kind!r}")
        if self.kind != "none" and not self.tol > 0:
            raise ValueError(f"stop rule {self.kind} needs a positive tolerance, got {self.tol}")
        if self.window < 1:
            raise ValueError(f"plateau window must be positive, got {self.window}")

    @classmethod
    def parse(cls, text: Optional[str]) -> "StopRule":
        """Parse ``none``, ``residual:TOL`` or ``plateau:TOL[:WINDOW]``.

        Raises:
            ValueError: On unknown kinds or malformed numbers.
        """
        if text is None or str(text).strip().lower() in ("", "none"):
            return cls()
        parts = str(text).strip().split(":")
        kind = parts[0].lower()
        try:
            if kind == "residual" and len(parts) == 2:
                return cls(kind="residual", tol=float(parts[1]))
            if kind == "plateau" and len(parts) in (2, 3):
                window = int(parts[2]) if len(parts) == 3 else 50
                return cls(kind="plateau", tol=float(parts[1]), window=window)
        except ValueError as e:
            raise ValueError(f"malformed stop rule {text!r}: {e}") from e
        raise ValueError(f"malformed stop rule {text!r}; expected none, residual:TOL or plateau:TOL[:WINDOW]")

    def __str__(self) -> str:
        if self.kind == "none":
            return "none"
        if self.kind == "residual":
            return f"residual:{self.tol:g}"
        return f"plateau:{self.tol:g}:{self.window}"


@dataclass
class RunResult:
    """Trace and final state of one engine run."""

    trace: list[IterationRecord]
    state: EngineState
    stopped_by: str = "max_iters"
    leader_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def total_messages(self) -> int:
        return sum(record.messages for record in self.trace)

    @property
    def mean_update_size(self) -> float:
        steps = self.trace[1:]
        if not steps:
            return 0.0
        return float(np.mean([record.num_leaders for record in steps]))


class ReallocationEngine:
    """Runs the reallocation iteration on one problem instance."""

    def __init__(self, instance: ProblemInstance, settings: Optional[SolverSettings] = None):
        """Initialize the engine.

        Args:
            instance: Validated problem instance; its barrier weight is used for
                every solve.
            settings: Solver constants for subproblem and neighborhood solves.
        """
        self.instance = instance
        self.settings = settings or DEFAULT_SETTINGS
        self.graph = instance.graph
        self._objectives = instance.objectives()
        self._b_in = instance.coupling.b_in
        self._b_eq = instance.coupling.b_eq
        self._last_residual_max = float("inf")

    # ------------------------------------------------------------------
    # Initialization
    # ------------------------------------------------------------------

    def init_even_split(self) -> list[RhsShare]:
        """Split ``b`` evenly, shifted by the nodes' lower bounds when known.

        Dispatch instances use ``y_i = A_i l_i + (b - sum_j A_j l_j) / n``;
        two-resource instances use ``y_i = b/n + 0.01 (A_i l_i - mean_j A_j l_j)``;
        anything else gets ``y_i = b / n``. Each share is checked by phase I.

        Raises:
            InitializationError: If some node's share admits no strictly
                feasible point.
        """
        inst = self.instance
        n = inst.n
        b = inst.coupling.b
        lower = inst.metadata.get("lower")
        family = inst.family

        if lower is not None and family in (FAMILY_DISPATCH, FAMILY_MULTI_RESOURCE):
            anchors = np.array([node.A @ np.asarray(l, dtype=float) for node, l in zip(inst.nodes, lower)])
            if family == FAMILY_DISPATCH:
                stacked = anchors + (b - anchors.sum(axis=0)) / n
            else:
                stacked = b / n + MULTI_RESOURCE_SPREAD * (anchors - anchors.mean(axis=0))
        else:
            stacked = np.tile(b / n, (n, 1))

        shares = [RhsShare.from_stacked(row, inst.m_in) for row in stacked]
        shares = self._rebalance(shares)
        for node, share in zip(inst.nodes, shares):
            program = ConstrainedProgram.for_nodes([node], inst.barrier, share.y_in, share.y_eq)
            if not phase1(program, self.settings).feasible:
                raise InitializationError(
                    f"even split gives node {node.id} an infeasible share {share.stacked.tolist()}; "
                    "use --init from-point or supply explicit shares"
                )
        logger.debug(f"Even split initialized {n} shares (family={family})")
        return shares

    def init_from_point(self, x_tilde: Sequence[np.ndarray]) -> list[RhsShare]:
        """Shares ``y_i = A_i x_i`` read off a feasible point.

        Raises:
            InitializationError: If the instance has inequality coupling rows or
                the point is not feasible.
        """
        inst = self.instance
        if inst.m_in > 0:
            raise InitializationError(
                "from-point initialization is unsupported with inequality coupling rows; use --init even"
            )
        if len(x_tilde) != inst.n:
            raise InitializationError(f"expected {inst.n} point blocks, got {len(x_tilde)}")
        points = [np.asarray(x, dtype=float).reshape(-1) for x in x_tilde]
        for node, x in zip(inst.nodes, points):
            if x.shape != (node.dim,):
                raise InitializationError(f"node {node.id}: point has shape {x.shape}, expected ({node.dim},)")
            if not node.is_interior(x):
                raise InitializationError(f"node {node.id}: point is not strictly inside its local constraints")
        total = sum(node.A_eq @ x for node, x in zip(inst.nodes, points))
        err = float(np.linalg.norm(total - self._b_eq, np.inf))
        if err > COUPLING_TOL * (1.0 + float(np.abs(self._b_eq).max(initial=0.0))):
            raise InitializationError(f"point violates the coupling equalities (error {err:.3e})")
        shares = [RhsShare(y_in=np.zeros(0), y_eq=node.A_eq @ x) for node, x in zip(inst.nodes, points)]
        return self._rebalance(shares)

    def slater_point(self) -> list[np.ndarray]:
        """A strictly feasible point of the whole problem, found by phase I.

        Raises:
            InitializationError: If the instance has no strictly feasible point.
        """
        inst = self.instance
        program = ConstrainedProgram.for_nodes(inst.nodes, inst.barrier, self._b_in, self._b_eq)
        start = phase1(program, self.settings)
        if not start.feasible:
            raise InitializationError(f"instance has no strictly feasible point (min t = {start.t:.3e})")
        return program.split(start.x)

    def init_x(self, y0: Sequence[RhsShare]) -> EngineState:
        """Solve every node's subproblem at its initial share.

        Raises:
            InitializationError: If a share is infeasible or its solve fails.
        """
        inst = self.instance
        if len(y0) != inst.n:
            raise InitializationError(f"expected {inst.n} shares, got {len(y0)}")
        xs, phis, us = [], [], []
        for node, share in zip(inst.nodes, y0):
            result = primal_value(node, inst.barrier, share, settings=self.settings)
            if not result.converged:
                raise InitializationError(
                    f"node {node.id}: subproblem at share {share.stacked.tolist()} is {result.status}"
                )
            xs.append(result.x_star)
            phis.append(result.value)
            us.append(result.multiplier)
        return EngineState(k=0, x=tuple(xs), y=tuple(y0), phi=np.array(phis), u=tuple(us))

    def initial_state(self, init: Union[InitStrategy, Sequence[RhsShare]] = "even") -> EngineState:
        """Build the k=0 state from a strategy name or explicit shares."""
        if init == "even":
            shares = self.init_even_split()
        elif init == "from-point":
            point = self.instance.initial_point
            if point is None:
                logger.info("No initial point in the instance; using the phase-I Slater point")
                point = self.slater_point()
            shares = self.init_from_point(point)
        elif isinstance(init, str):
            raise InitializationError(f"unknown init strategy {init!r}; expected even or from-point")
        else:
            shares = list(init)
        return self.init_x(shares)

    def _rebalance(self, shares: Sequence[RhsShare]) -> list[RhsShare]:
        """Spread ``b - sum(y)`` equally so shares sum to ``b`` up to round-off."""
        n = len(shares)
        drift = self.instance.coupling.b - sum(share.stacked for share in shares)
        return [RhsShare.from_stacked(share.stacked + drift / n, self.instance.m_in) for share in shares]

    # ------------------------------------------------------------------
    # Iteration
    # ------------------------------------------------------------------

    def step(self, state: EngineState, update_set: UpdateSet) -> tuple[EngineState, IterationRecord]:
        """Let every leader reallocate within its closed neighborhood.

        Leaders are processed in ascending id order; their neighborhoods are
        disjoint, so the result does not depend on the order.

        Raises:
            NeighborhoodInfeasibleError: With leader id and shares attached.
            SolverError: If a neighborhood solve does not converge.
        """
        started = time.perf_counter()
        inst = self.instance
        x = list(state.x)
        y = list(state.y)
        phi = state.phi.copy()
        u = list(state.u)
        messages = voting_message_count(self.graph)

        for leader in update_set:
            scope = self.graph.closed(leader)
            nodes = [inst.nodes[j] for j in scope]
            rhs_in = sum((y[j].y_in for j in scope), np.zeros(inst.m_in))
            rhs_eq = sum((y[j].y_eq for j in scope), np.zeros(inst.m_eq))
            try:
                result = solve_neighborhood(
                    nodes,
                    inst.barrier,
                    rhs_in,
                    rhs_eq,
                    warm_start=[x[j] for j in scope],
                    settings=self.settings,
                )
            except NeighborhoodInfeasibleError as e:
                e.diagnostics.update(
                    {
                        "leader": leader,
                        "k": state.k,
                        "shares": {j: y[j].stacked.tolist() for j in scope},
                        "x": {j: x[j].tolist() for j in scope},
                    }
                )
                logger.error(f"Leader {leader} at k={state.k}: {e} ({e.diagnostics})")
                raise
            except SolverError as e:
                logger.error(f"Leader {leader} at k={state.k}: {e}")
                raise SolverError(f"leader {leader} at iteration {state.k}: {e}", e.result) from e

            used_in = sum((inst.nodes[j].A_in @ xj for j, xj in zip(scope, result.blocks)), np.zeros(inst.m_in))
            used_eq = sum((inst.nodes[j].A_eq @ xj for j, xj in zip(scope, result.blocks)), np.zeros(inst.m_eq))
            spare_in = (rhs_in - used_in) / len(scope)
            spare_eq = (rhs_eq - used_eq) / len(scope)
            for j, xj, value in zip(scope, result.blocks, result.values):
                node = inst.nodes[j]
                x[j] = xj
                y[j] = RhsShare(y_in=node.A_in @ xj + spare_in, y_eq=node.A_eq @ xj + spare_eq)
                phi[j] = value
                u[j] = result.multiplier.copy()
            messages += 2 * (len(scope) - 1)

        k = state.k + 1
        if k % RENORMALIZE_EVERY == 0:
            y = self._rebalance(y)
        new_state = EngineState(k=k, x=tuple(x), y=tuple(y), phi=phi, u=tuple(u))

        before, after = float(np.sum(state.phi)), float(np.sum(phi))
        if after > before + MONOTONE_TOL:
            logger.warning(f"sum(phi) increased at k={k}: {before:.12g} -> {after:.12g}")

        elapsed = (time.perf_counter() - started) * 1000.0
        return new_state, self.record(new_state, update_set, wallclock_ms=elapsed, messages=messages)

    def record(
        self,
        state: EngineState,
        update_set: UpdateSet = UpdateSet(),
        residual_sum: Optional[float] = None,
        wallclock_ms: float = 0.0,
        messages: int = 0,
    ) -> IterationRecord:
        """Metrics of a state."""
        sum_f = sum(obj.f_value(xi) for obj, xi in zip(self._objectives, state.x))
        sum_F = sum(obj.value(xi) for obj, xi in zip(self._objectives, state.x))
        in_err, eq_err = self._coupling_errors(state)
        return IterationRecord(
            k=state.k,
            update_set=update_set,
            sum_f=float(sum_f),
            sum_F=float(sum_F),
            sum_phi=float(np.sum(state.phi)),
            feas_in_err=in_err,
            feas_eq_err=eq_err,
            residual_sum=residual_sum,
            wallclock_ms=wallclock_ms,
            messages=messages,
        )

    def _coupling_errors(self, state: EngineState) -> tuple[float, float]:
        inst = self.instance
        in_err = 0.0
        if inst.m_in:
            used = sum(node.A_in @ xi for node, xi in zip(inst.nodes, state.x))
            in_err = float(np.max(np.maximum(used - self._b_in, 0.0)))
        eq_err = 0.0
        if inst.m_eq:
            used = sum(node.A_eq @ xi for node, xi in zip(inst.nodes, state.x))
            eq_err = float(np.linalg.norm(used - self._b_eq))
        return in_err, eq_err

    def run(
        self,
        init: Union[InitStrategy, Sequence[RhsShare]] = "even",
        max_iters: int = 1000,
        seed: int = 0,
        stop: Optional[StopRule] = None,
        residual_every: int = 0,
        selector: Optional[UpdateSetProvider] = None,
        on_record: Optional[Callable[[IterationRecord], None]] = None,
    ) -> RunResult:
        """Run the iteration from an initial state.

        Args:
            init: ``even``, ``from-point`` or explicit shares.
            max_iters: Iteration budget.
            seed: Seed of the voting selector.
            stop: Early stopping rule.
            residual_every: Compute the residual sum every this many iterations
                (0 disables; a residual stop rule defaults it to 1).
            selector: Update-set provider; defaults to seeded voting.
            on_record: Called with every record as it is produced.

        Returns:
            RunResult with the trace (record 0 is the initial state).
        """
        if max_iters < 1:
            raise ValueError(f"max_iters must be at least 1, got {max_iters}")
        stop = stop or StopRule()
        if stop.kind == "residual" and residual_every <= 0:
            residual_every = 1
        selector = selector or VotingSelector(self.graph, seed)

        self._last_residual_max = float("inf")
        state = self.initial_state(init)
        trace = [self._record_with_residual(state, UpdateSet(), residual_every)]
        if on_record:
            on_record(trace[0])
        counts = np.zeros(self.instance.n, dtype=int)
        stopped_by = "max_iters"

        for _ in range(max_iters):
            if self._should_stop(trace, stop):
                stopped_by = stop.kind
                break
            update_set = selector.select()
            for leader in update_set:
                counts[leader] += 1
            state, record = self.step(state, update_set)
            if residual_every and state.k % residual_every == 0:
                record = replace(record, residual_sum=self.residual_sum(state))
            trace.append(record)
            if on_record:
                on_record(record)
        else:
            if self._should_stop(trace, stop):
                stopped_by = stop.kind

        logger.info(
            f"Run finished after {state.k} iterations ({stopped_by}); "
            f"sum_phi={trace[-1].sum_phi:.12g}"
        )
        return RunResult(trace=trace, state=state, stopped_by=stopped_by, leader_counts=counts)

    def _record_with_residual(self, state: EngineState, update_set: UpdateSet, every: int) -> IterationRecord:
        residual = self.residual_sum(state) if every else None
        return self.record(state, update_set, residual_sum=residual)

    def _should_stop(self, trace: list[IterationRecord], stop: StopRule) -> bool:
        if stop.kind == "residual":
            last = trace[-1]
            return last.residual_sum is not None and self._last_residual_max <= stop.tol
        if stop.kind == "plateau":
            if len(trace) <= stop.window:
                return False
            recent, past = trace[-1].sum_phi, trace[-1 - stop.window].sum_phi
            return past - recent <= stop.tol * (1.0 + abs(recent))
        return False

    # ------------------------------------------------------------------
    # Diagnostics
    # ------------------------------------------------------------------

    def residual(self, state: EngineState, i: int) -> float:
        """Improvement available from re-solving node ``i``'s neighborhood.

        ``r_i`` is the cached ``sum(phi_j)`` over the closed neighborhood minus
        the optimal value of pooling the neighborhood's shares. Values above
        ``-1e-8`` are clamped to zero.
        """
        inst = self.instance
        scope = self.graph.closed(i)
        rhs_in = sum((state.y[j].y_in for j in scope), np.zeros(inst.m_in))
        rhs_eq = sum((state.y[j].y_eq for j in scope), np.zeros(inst.m_eq))
        result = solve_neighborhood(
            [inst.nodes[j] for j in scope],
            inst.barrier,
            rhs_in,
            rhs_eq,
            warm_start=[state.x[j] for j in scope],
            settings=self.settings,
        )
        r = float(sum(state.phi[j] for j in scope)) - result.value
        if r < RESIDUAL_FLOOR:
            logger.warning(f"Residual of node {i} at k={state.k} is {r:.3e}")
        return max(r, 0.0)

    def residuals(self, state: EngineState) -> np.ndarray:
        return np.array([self.residual(state, i) for i in range(self.instance.n)])

    def residual_sum(self, state: EngineState) -> float:
        values = self.residuals(state)
        self._last_residual_max = float(values.max())
        return float(values.sum())

    def audit_feasibility(self, state: EngineState) -> ValidationReport:
        """Check a state for feasibility, conservation and consistency.

        Failures are reported with their magnitudes, never raised.
        """
        inst = self.instance
        checks = []

        in_err, eq_err = self._coupling_errors(state)
        checks.append(
            CheckResult(
                "coupling_in",
                "pass" if in_err <= COUPLING_TOL else "fail",
                f"max violation {in_err:.3e}",
                in_err,
            )
        )
        checks.append(
            CheckResult(
                "coupling_eq",
                "pass" if eq_err <= COUPLING_TOL else "fail",
                f"equality error {eq_err:.3e}",
                eq_err,
            )
        )

        worst_g = max(
            (float(np.max(node.constraint_values(xi), initial=-np.inf)) for node, xi in zip(inst.nodes, state.x)),
            default=-np.inf,
        )
        checks.append(
            CheckResult(
                "interiority",
                "pass" if worst_g < 0 else "fail",
                f"max local constraint value {worst_g:.3e}",
                worst_g,
            )
        )

        drift = float(np.max(np.abs(sum(share.stacked for share in state.y) - inst.coupling.b)))
        checks.append(
            CheckResult(
                "conservation",
                "pass" if drift <= CONSERVATION_TOL else "fail",
                f"|sum(y) - b| = {drift:.3e}",
                drift,
            )
        )

        share_err = 0.0
        for node, xi, share in zip(inst.nodes, state.x, state.y):
            if inst.m_in:
                share_err = max(share_err, float(np.max(node.A_in @ xi - share.y_in)))
            if inst.m_eq:
                share_err = max(share_err, float(np.max(np.abs(node.A_eq @ xi - share.y_eq))))
        checks.append(
            CheckResult(
                "share_feasibility",
                "pass" if share_err <= SHARE_TOL else "fail",
                f"max share violation {share_err:.3e}",
                share_err,
            )
        )

        mismatch = 0.0
        if worst_g < 0:
            for obj, xi, phi in zip(self._objectives, state.x, state.phi):
                F = obj.value(xi)
                mismatch = max(mismatch, abs(F - phi) / (1.0 + abs(F)))
            checks.append(
                CheckResult(
                    "consistency",
                    "pass" if mismatch <= CONSISTENCY_TOL else "fail",
                    f"max |phi - F| (relative) {mismatch:.3e}",
                    mismatch,
                )
            )
        else:
            checks.append(CheckResult("consistency", "skipped", "x outside the strict interior"))

        return ValidationReport(tuple(checks))
