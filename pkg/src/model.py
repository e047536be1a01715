"""Problem instances for networked resource allocation with coupling constraints.

An instance is a set of nodes, each owning a convex objective ``f_i``, local
constraints ``g_i^j(x) <= 0`` and coupling rows ``A_i = [A_i^in; A_i^eq]``. The
nodes jointly satisfy ``sum_i A_i^in x_i <= b^in`` and ``sum_i A_i^eq x_i = b^eq``
while talking only along the edges of a communication graph.

Local constraints are handled by a barrier term with weight ``c``; the
barrier-transformed objective ``F_i = f_i + c * sum_j B(g_i^j)`` lives on the open
set where every ``g_i^j < 0``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Literal, Optional, Sequence

import numpy as np

from .errors import DomainViolationError, InstanceError
from .network import Graph, random_connected_graph

logger = logging.getLogger(__name__)

# Tolerances for structural checks
PSD_TOLERANCE = 1e-10
RANK_TOLERANCE = 1e-9

BarrierKind = Literal["log", "inverse"]
BARRIER_KINDS = ("log", "inverse")

# Roles in the two-resource family
ROLE_RENEWABLE = "renewable-gen"
ROLE_COAL = "coal-gen"
ROLE_CONSUMER = "consumer"
ROLES = (ROLE_RENEWABLE, ROLE_COAL, ROLE_CONSUMER)

FAMILY_DISPATCH = "dispatch"
FAMILY_MULTI_RESOURCE = "multi_resource"


def _frozen(values: Any, ndim: int, name: str) -> np.ndarray:
    """Copy ``values`` into a read-only float array of the given rank."""
    array = np.array(values, dtype=float)
    if ndim == 2 and array.size == 0:
        array = array.reshape(0, array.shape[-1] if array.ndim == 2 else 0)
    if array.ndim != ndim:
        raise InstanceError(f"{name}: expected a {ndim}-d array, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise InstanceError(f"{name}: entries must be finite")
    array.setflags(write=False)
    return array


def _frozen_vector(values: Any, name: str) -> np.ndarray:
    return _frozen(np.atleast_1d(values) if np.size(values) else np.zeros(0), 1, name)


@dataclass(frozen=True)
class BarrierSpec:
    """Barrier family and weight applied to every local constraint."""

    kind: BarrierKind = "log"
    c: float = 1e-3

    def __post_init__(self):
        if self.kind not in BARRIER_KINDS:
            raise InstanceError(f"barrier.kind must be one of {BARRIER_KINDS}, got {self.kind!r}")
        if not (isinstance(self.c, (int, float)) and math.isfinite(self.c) and self.c > 0):
            raise InstanceError(f"barrier.c must be a positive number, got {self.c!r}")

    def value(self, g: np.ndarray) -> np.ndarray:
        if self.kind == "log":
            return -np.log(-g)
        return -1.0 / g

    def first(self, g: np.ndarray) -> np.ndarray:
        if self.kind == "log":
            return -1.0 / g
        return 1.0 / g**2

    def second(self, g: np.ndarray) -> np.ndarray:
        if self.kind == "log":
            return 1.0 / g**2
        return -2.0 / g**3

    def to_dict(self) -> dict:
        return {"kind": self.kind, "c": self.c}

    @classmethod
    def from_dict(cls, data: dict) -> "BarrierSpec":
        return cls(kind=data.get("kind", "log"), c=data.get("c", 1e-3))


def barrier_eval(g_value: float, spec: BarrierSpec) -> float:
    """Evaluate ``B(g)`` for a single constraint value.

    Raises:
        DomainViolationError: If ``g_value >= 0``.
    """
    if not g_value < 0:
        raise DomainViolationError(f"barrier evaluated at g={g_value!r}; requires g < 0")
    return float(spec.value(np.float64(g_value)))


def max_feasible_step(g0: np.ndarray, g1: np.ndarray, g2: np.ndarray) -> float:
    """Largest ``alpha`` keeping every ``g0 + g1*alpha + g2*alpha**2`` negative.

    Assumes ``g0 < 0`` and ``g2 >= 0`` (convex along the line). Returns ``inf``
    when no constraint is ever reached.
    """
    if len(g0) == 0:
        return math.inf
    disc = np.sqrt(np.maximum(g1 * g1 - 4.0 * g2 * g0, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        rising = -2.0 * g0 / (g1 + disc)
        falling = np.where(g2 > 0, (disc - g1) / (2.0 * g2), np.inf)
    steps = np.where(g1 >= 0, rising, falling)
    steps = np.where(np.isnan(steps) | (steps <= 0), np.inf, steps)
    return float(np.min(steps))


@dataclass(frozen=True, eq=False)
class SmoothConvexFn:
    """Convex quadratic or affine function ``x'Qx + q'x + r`` on ``R^dim``."""

    Q: np.ndarray
    q: np.ndarray
    r: float = 0.0
    kind: Literal["quadratic", "affine"] = "quadratic"

    def __post_init__(self):
        """Freeze arrays and check shapes and positive semidefiniteness.

        Raises:
            InstanceError: If shapes disagree or Q is not PSD.
        """
        q = _frozen(self.q, 1, "q")
        dim = q.shape[0]
        if dim < 1:
            raise InstanceError("function dimension must be positive")
        Q = _frozen(np.zeros((dim, dim)) if self.Q is None else self.Q, 2, "Q")
        if Q.shape != (dim, dim):
            raise InstanceError(f"Q: expected shape {(dim, dim)}, got {Q.shape}")
        if not np.allclose(Q, Q.T, atol=PSD_TOLERANCE):
            raise InstanceError("Q: matrix must be symmetric")
        if self.kind == "affine" and np.any(Q != 0):
            raise InstanceError("affine function cannot carry a quadratic term")
        if self.kind == "quadratic":
            min_eig = float(np.linalg.eigvalsh(Q).min())
            if min_eig < -PSD_TOLERANCE * max(1.0, float(np.abs(Q).max())):
                raise InstanceError(f"Q: matrix must be positive semidefinite (min eig {min_eig:.3e})")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", float(self.r))

    @classmethod
    def quadratic(cls, Q: Any, q: Any, r: float = 0.0) -> "SmoothConvexFn":
        return cls(Q=Q, q=q, r=r, kind="quadratic")

    @classmethod
    def affine(cls, a: Any, beta: float = 0.0) -> "SmoothConvexFn":
        a = np.atleast_1d(np.asarray(a, dtype=float))
        return cls(Q=np.zeros((a.size, a.size)), q=a, r=beta, kind="affine")

    @property
    def dim(self) -> int:
        return self.q.shape[0]

    @property
    def is_affine(self) -> bool:
        return self.kind == "affine" or not np.any(self.Q)

    def value(self, x: np.ndarray) -> float:
        return float(x @ self.Q @ x + self.q @ x + self.r)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * (self.Q @ x) + self.q

    def hessian(self, x: Optional[np.ndarray] = None) -> np.ndarray:
        return 2.0 * self.Q

    def line_coefficients(self, x: np.ndarray, d: np.ndarray) -> tuple[float, float, float]:
        """Coefficients of ``g(x + alpha d) = g0 + g1 alpha + g2 alpha^2``."""
        return self.value(x), float(self.gradient(x) @ d), float(d @ self.Q @ d)

    def to_dict(self) -> dict:
        if self.kind == "affine":
            return {"kind": "affine", "a": self.q.tolist(), "beta": self.r}
        return {"kind": "quadratic", "Q": self.Q.tolist(), "q": self.q.tolist(), "r": self.r}

    @classmethod
    def from_dict(cls, data: dict, path: str = "function") -> "SmoothConvexFn":
        """Restore from the JSON function schema.

        Raises:
            InstanceError: With the field path when a key is missing or invalid.
        """
        try:
            kind = data["kind"]
            if kind == "affine":
                return cls.affine(data["a"], data.get("beta", 0.0))
            if kind == "quadratic":
                q = np.atleast_1d(np.asarray(data["q"], dtype=float))
                Q = data.get("Q")
                return cls.quadratic(np.zeros((q.size, q.size)) if Q is None else Q, q, data.get("r", 0.0))
            raise InstanceError(f"{path}.kind: unknown function kind {kind!r}")
        except KeyError as e:
            raise InstanceError(f"{path}: missing required field {e}") from e
        except InstanceError as e:
            if str(e).startswith(path):
                raise
            raise InstanceError(f"{path}.{e}") from e
        except (TypeError, ValueError) as e:
            raise InstanceError(f"{path}: {e}") from e


@dataclass(frozen=True, eq=False)
class NodeProblem:
    """One agent's objective, local constraints and coupling rows."""

    id: int
    objective: SmoothConvexFn
    local_constraints: tuple[SmoothConvexFn, ...] = ()
    A_in: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))
    A_eq: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))
    # Stacked constraint data, filled in __post_init__
    _G_Q: np.ndarray = field(init=False, repr=False, compare=False)
    _G_q: np.ndarray = field(init=False, repr=False, compare=False)
    _G_r: np.ndarray = field(init=False, repr=False, compare=False)
    _quadratic_constraints: bool = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        dim = self.objective.dim
        constraints = tuple(self.local_constraints)
        for j, g in enumerate(constraints):
            if g.dim != dim:
                raise InstanceError(
                    f"node {self.id}: constraint {j} has dim {g.dim}, objective has dim {dim}"
                )
        A_in = _frozen(np.zeros((0, dim)) if np.size(self.A_in) == 0 else self.A_in, 2, "A_in")
        A_eq = _frozen(np.zeros((0, dim)) if np.size(self.A_eq) == 0 else self.A_eq, 2, "A_eq")
        for name, A in (("A_in", A_in), ("A_eq", A_eq)):
            if A.shape[1] != dim:
                raise InstanceError(f"node {self.id}: {name} has {A.shape[1]} columns, expected {dim}")

        object.__setattr__(self, "local_constraints", constraints)
        object.__setattr__(self, "A_in", A_in)
        object.__setattr__(self, "A_eq", A_eq)
        object.__setattr__(self, "_G_Q", np.array([g.Q for g in constraints]).reshape(-1, dim, dim))
        object.__setattr__(self, "_G_q", np.array([g.q for g in constraints]).reshape(-1, dim))
        object.__setattr__(self, "_G_r", np.array([g.r for g in constraints], dtype=float))
        object.__setattr__(self, "_quadratic_constraints", any(not g.is_affine for g in constraints))

    @property
    def dim(self) -> int:
        return self.objective.dim

    @property
    def m_in(self) -> int:
        return self.A_in.shape[0]

    @property
    def m_eq(self) -> int:
        return self.A_eq.shape[0]

    @property
    def A(self) -> np.ndarray:
        """Stacked coupling rows ``[A_in; A_eq]``."""
        return np.vstack([self.A_in, self.A_eq])

    def constraint_values(self, x: np.ndarray) -> np.ndarray:
        values = self._G_q @ x + self._G_r
        if self._quadratic_constraints:
            values = values + np.einsum("pij,i,j->p", self._G_Q, x, x)
        return values

    def constraint_gradients(self, x: np.ndarray) -> np.ndarray:
        if self._quadratic_constraints:
            return 2.0 * (self._G_Q @ x) + self._G_q
        return self._G_q

    def constraint_curvature(self, d: np.ndarray) -> np.ndarray:
        """Second-order line coefficients ``d'Q_j d`` of every constraint."""
        if self._quadratic_constraints:
            return np.einsum("pij,i,j->p", self._G_Q, d, d)
        return np.zeros(len(self.local_constraints))

    def weighted_constraint_hessian(self, weights: np.ndarray) -> np.ndarray:
        """Return ``sum_j w_j * hess g_j``."""
        if self._quadratic_constraints:
            return np.einsum("p,pij->ij", weights, 2.0 * self._G_Q)
        return np.zeros((self.dim, self.dim))

    def is_interior(self, x: np.ndarray) -> bool:
        return bool(np.all(self.constraint_values(x) < 0))

    def to_dict(self) -> dict:
        return {
            "objective": self.objective.to_dict(),
            "constraints": [g.to_dict() for g in self.local_constraints],
            "A_in": self.A_in.tolist(),
            "A_eq": self.A_eq.tolist(),
        }

    @classmethod
    def from_dict(cls, node_id: int, data: dict) -> "NodeProblem":
        path = f"nodes[{node_id}]"
        try:
            objective = SmoothConvexFn.from_dict(data["objective"], f"{path}.objective")
            constraints = tuple(
                SmoothConvexFn.from_dict(g, f"{path}.constraints[{j}]")
                for j, g in enumerate(data.get("constraints", []))
            )
            dim = objective.dim
            A_in = np.array(data.get("A_in", []), dtype=float).reshape(-1, dim)
            A_eq = np.array(data.get("A_eq", []), dtype=float).reshape(-1, dim)
        except KeyError as e:
            raise InstanceError(f"{path}: missing required field {e}") from e
        except (TypeError, ValueError) as e:
            if isinstance(e, InstanceError):
                raise
            raise InstanceError(f"{path}: coupling rows do not match the objective dimension ({e})") from e
        return cls(id=node_id, objective=objective, local_constraints=constraints, A_in=A_in, A_eq=A_eq)


class CompositeObjective:
    """Barrier-transformed objective ``F_i = f_i + c * sum_j B(g_i^j)``.

    Every evaluation raises DomainViolationError outside the strict interior.
    """

    def __init__(self, node: NodeProblem, barrier: BarrierSpec):
        self.node = node
        self.barrier = barrier

    @property
    def dim(self) -> int:
        return self.node.dim

    def _interior_values(self, x: np.ndarray) -> np.ndarray:
        g = self.node.constraint_values(x)
        if np.any(g >= 0) or not np.all(np.isfinite(g)):
            raise DomainViolationError(
                f"node {self.node.id}: point outside strict interior (max g = {float(np.max(g)):.3e})"
            )
        return g

    def f_value(self, x: np.ndarray) -> float:
        return self.node.objective.value(x)

    def value(self, x: np.ndarray) -> float:
        g = self._interior_values(x)
        return self.node.objective.value(x) + self.barrier.c * float(np.sum(self.barrier.value(g)))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        g = self._interior_values(x)
        grads = self.node.constraint_gradients(x)
        return self.node.objective.gradient(x) + self.barrier.c * (grads.T @ self.barrier.first(g))

    def hessian(self, x: np.ndarray) -> np.ndarray:
        g = self._interior_values(x)
        grads = self.node.constraint_gradients(x)
        c = self.barrier.c
        H = self.node.objective.hessian(x) + c * (grads.T * self.barrier.second(g)) @ grads
        return H + c * self.node.weighted_constraint_hessian(self.barrier.first(g))


def barrier_objective(node: NodeProblem, barrier: BarrierSpec) -> CompositeObjective:
    """Return ``F_i`` with value, gradient and Hessian for ``node``."""
    return CompositeObjective(node, barrier)


@dataclass(frozen=True, eq=False)
class CouplingSpec:
    """Right-hand sides of the coupling constraints."""

    b_in: np.ndarray = field(default_factory=lambda: np.zeros(0))
    b_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "b_in", _frozen_vector(self.b_in, "coupling.b_in"))
        object.__setattr__(self, "b_eq", _frozen_vector(self.b_eq, "coupling.b_eq"))

    @property
    def m_in(self) -> int:
        return self.b_in.shape[0]

    @property
    def m_eq(self) -> int:
        return self.b_eq.shape[0]

    @property
    def b(self) -> np.ndarray:
        return np.concatenate([self.b_in, self.b_eq])

    def to_dict(self) -> dict:
        return {"b_in": self.b_in.tolist(), "b_eq": self.b_eq.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "CouplingSpec":
        try:
            return cls(
                b_in=np.asarray(data.get("b_in", []), dtype=float),
                b_eq=np.asarray(data.get("b_eq", []), dtype=float),
            )
        except (TypeError, ValueError) as e:
            raise InstanceError(f"coupling: {e}") from e


@dataclass(frozen=True, eq=False)
class RhsShare:
    """A node's share ``y_i = (y_i^in, y_i^eq)`` of the coupling budget."""

    y_in: np.ndarray
    y_eq: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "y_in", _frozen_vector(self.y_in, "y_in"))
        object.__setattr__(self, "y_eq", _frozen_vector(self.y_eq, "y_eq"))

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.y_in, self.y_eq])

    @classmethod
    def from_stacked(cls, y: np.ndarray, m_in: int) -> "RhsShare":
        y = np.asarray(y, dtype=float)
        return cls(y_in=y[:m_in], y_eq=y[m_in:])


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """The full networked problem."""

    nodes: tuple[NodeProblem, ...]
    coupling: CouplingSpec
    graph: Graph
    barrier: BarrierSpec = field(default_factory=BarrierSpec)
    assume_compact: bool = False
    metadata: dict = field(default_factory=dict, compare=False)
    initial_point: Optional[tuple[np.ndarray, ...]] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        if self.initial_point is not None:
            object.__setattr__(
                self, "initial_point", tuple(_frozen(x, 1, "initial_point") for x in self.initial_point)
            )

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def m_in(self) -> int:
        return self.coupling.m_in

    @property
    def m_eq(self) -> int:
        return self.coupling.m_eq

    @property
    def family(self) -> Optional[str]:
        return self.metadata.get("family")

    def objectives(self) -> list[CompositeObjective]:
        return [barrier_objective(node, self.barrier) for node in self.nodes]

    def with_barrier(self, c: Optional[float] = None, kind: Optional[BarrierKind] = None) -> "ProblemInstance":
        """Copy of the instance with a different barrier weight or family."""
        barrier = BarrierSpec(kind=kind or self.barrier.kind, c=self.barrier.c if c is None else c)
        return replace(self, barrier=barrier)

    def to_dict(self) -> dict:
        data = {
            "nodes": [node.to_dict() for node in self.nodes],
            "coupling": self.coupling.to_dict(),
            "graph": self.graph.to_dict(),
            "barrier": self.barrier.to_dict(),
        }
        if self.assume_compact:
            data["assume_compact"] = True
        if self.metadata:
            data["metadata"] = self.metadata
        if self.initial_point is not None:
            data["initial_point"] = [x.tolist() for x in self.initial_point]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ProblemInstance":
        """Restore an instance from the JSON schema.

        Raises:
            InstanceError: With a field path for missing or malformed entries.
        """
        if not isinstance(data, dict):
            raise InstanceError("instance document must be a mapping")
        for key in ("nodes", "coupling", "graph"):
            if key not in data:
                raise InstanceError(f"{key}: missing required field")
        if not isinstance(data["nodes"], list) or not data["nodes"]:
            raise InstanceError("nodes: expected a non-empty list")

        nodes = tuple(NodeProblem.from_dict(i, node) for i, node in enumerate(data["nodes"]))
        try:
            graph = Graph.from_dict(data["graph"])
        except ValueError as e:
            raise InstanceError(f"graph: {e}") from e
        barrier_data = data.get("barrier", {})
        try:
            barrier = BarrierSpec.from_dict(barrier_data)
        except InstanceError as e:
            raise InstanceError(f"barrier: {e}") from e
        initial = data.get("initial_point")
        return cls(
            nodes=nodes,
            coupling=CouplingSpec.from_dict(data["coupling"]),
            graph=graph,
            barrier=barrier,
            assume_compact=bool(data.get("assume_compact", False)),
            metadata=dict(data.get("metadata", {})),
            initial_point=None if initial is None else tuple(np.asarray(x, dtype=float) for x in initial),
        )


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    """Outcome of one validation check."""

    name: str
    status: Literal["pass", "fail", "asserted", "skipped"]
    detail: str = ""
    magnitude: Optional[float] = None

    @property
    def ok(self) -> bool:
        return self.status in ("pass", "asserted")


@dataclass(frozen=True)
class ValidationReport:
    """Per-check results of validate_instance."""

    checks: tuple[CheckResult, ...]

    @property
    def ok(self) -> bool:
        return all(check.ok or check.status == "skipped" for check in self.checks) and not self.failures

    @property
    def failures(self) -> list[CheckResult]:
        return [check for check in self.checks if check.status == "fail"]

    def __getitem__(self, name: str) -> CheckResult:
        for check in self.checks:
            if check.name == name:
                return check
        raise KeyError(name)

    def summary(self) -> str:
        if self.ok:
            return "all checks passed"
        return "; ".join(f"{c.name}: {c.detail}" for c in self.failures)


def _check_dimensions(inst: ProblemInstance) -> CheckResult:
    m_in, m_eq = inst.m_in, inst.m_eq
    if m_in + m_eq < 1:
        return CheckResult("dimensions", "fail", "no coupling rows (m_in + m_eq must be >= 1)")
    problems = []
    for index, node in enumerate(inst.nodes):
        if node.id != index:
            problems.append(f"node at position {index} has id {node.id}")
        if node.m_in != m_in:
            problems.append(f"node {index}: A_in has {node.m_in} rows, coupling has {m_in}")
        if node.m_eq != m_eq:
            problems.append(f"node {index}: A_eq has {node.m_eq} rows, coupling has {m_eq}")
    if inst.graph.n != inst.n:
        problems.append(f"graph has {inst.graph.n} vertices for {inst.n} nodes")
    if inst.initial_point is not None:
        if len(inst.initial_point) != inst.n or any(
            x.shape != (node.dim,) for x, node in zip(inst.initial_point, inst.nodes)
        ):
            problems.append("initial_point does not match node dimensions")
    if problems:
        return CheckResult("dimensions", "fail", "; ".join(problems))
    return CheckResult("dimensions", "pass", f"n={inst.n}, m_in={m_in}, m_eq={m_eq}")


def _check_rank(inst: ProblemInstance) -> CheckResult:
    deficient = []
    for node in inst.nodes:
        A = node.A
        m = A.shape[0]
        if m == 0:
            continue
        singular = np.linalg.svd(A, compute_uv=False)
        rank = int(np.sum(singular > RANK_TOLERANCE * singular.max())) if singular.max() > 0 else 0
        if rank < m:
            deficient.append(f"node {node.id} (rank {rank} < {m})")
    if deficient:
        return CheckResult("rank", "fail", "rank-deficient coupling rows: " + ", ".join(deficient))
    return CheckResult("rank", "pass", "every A_i has full row rank")


def _check_connectivity(inst: ProblemInstance) -> CheckResult:
    if inst.graph.is_connected():
        return CheckResult("connectivity", "pass", f"{inst.graph.num_edges} edges")
    return CheckResult("connectivity", "fail", "communication graph is not connected")


def _check_slater(inst: ProblemInstance) -> CheckResult:
    from .localsolve import ConstrainedProgram, phase1

    program = ConstrainedProgram.for_nodes(inst.nodes, inst.barrier, inst.coupling.b_in, inst.coupling.b_eq)
    result = phase1(program)
    if result.feasible:
        return CheckResult("slater", "pass", f"strictly feasible point found (t = {result.t:.3e})")
    return CheckResult("slater", "fail", f"no strictly feasible point (min t = {result.t:.3e})")


def _coordinate_bounds(node: NodeProblem) -> tuple[np.ndarray, np.ndarray, bool]:
    """Which coordinates of ``node`` are bounded below/above by single-variable rows."""
    lower = np.zeros(node.dim, dtype=bool)
    upper = np.zeros(node.dim, dtype=bool)
    ellipsoid = False
    for g in node.local_constraints:
        if not g.is_affine:
            if float(np.linalg.eigvalsh(g.Q).min()) > PSD_TOLERANCE:
                ellipsoid = True
            continue
        support = np.flatnonzero(g.q)
        if support.size == 1:
            k = support[0]
            if g.q[k] > 0:
                upper[k] = True
            else:
                lower[k] = True
    return lower, upper, ellipsoid


def _check_compactness(inst: ProblemInstance) -> CheckResult:
    bounds = [_coordinate_bounds(node) for node in inst.nodes]
    lower = [b[0].copy() for b in bounds]
    upper = [b[1].copy() for b in bounds]
    for i, (_, _, ellipsoid) in enumerate(bounds):
        if ellipsoid:
            lower[i][:] = True
            upper[i][:] = True
    if all(l.all() and u.all() for l, u in zip(lower, upper)):
        return CheckResult("compactness", "pass", "every local set is bounded")

    # Nonnegative coupling rows close the set when every coordinate they touch
    # is bounded from the opposite side.
    rows = [(node.A_in, False) for node in inst.nodes], [(node.A_eq, True) for node in inst.nodes]
    changed = True
    while changed:
        changed = False
        for kind_rows, is_eq in zip(rows, (False, True)):
            m = inst.m_eq if is_eq else inst.m_in
            for r in range(m):
                coeffs = [A[r] for A, _ in kind_rows]
                if any(np.any(c < 0) for c in coeffs):
                    continue
                touched = [np.flatnonzero(c > 0) for c in coeffs]
                if all(lower[i][t].all() for i, t in enumerate(touched)):
                    for i, t in enumerate(touched):
                        if not upper[i][t].all():
                            upper[i][t] = True
                            changed = True
                if is_eq and all(upper[i][t].all() for i, t in enumerate(touched)):
                    for i, t in enumerate(touched):
                        if not lower[i][t].all():
                            lower[i][t] = True
                            changed = True
    if all(l.all() and u.all() for l, u in zip(lower, upper)):
        return CheckResult("compactness", "pass", "bounded by local bounds and nonnegative coupling rows")
    if inst.assume_compact:
        return CheckResult("compactness", "asserted", "not certified; assume_compact is set")
    return CheckResult("compactness", "fail", "feasible set not certified bounded; set assume_compact to assert it")


def validate_instance(inst: ProblemInstance) -> ValidationReport:
    """Check an instance against the standing assumptions.

    The report covers dimension consistency, full row rank of every ``A_i``,
    graph connectivity, compactness (certified or asserted) and existence of a
    strictly feasible point via a phase-I solve of the full problem. Failures
    are reported, never raised.
    """
    dimensions = _check_dimensions(inst)
    checks = [dimensions, _check_rank(inst), _check_connectivity(inst)]
    if dimensions.ok:
        checks.append(_check_compactness(inst))
        checks.append(_check_slater(inst))
    else:
        checks.append(CheckResult("compactness", "skipped", "dimensions inconsistent"))
        checks.append(CheckResult("slater", "skipped", "dimensions inconsistent"))
    report = ValidationReport(tuple(checks))
    logger.debug(f"Validated instance with n={inst.n}: {report.summary()}")
    return report


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def _box(lower: float, upper: float) -> tuple[SmoothConvexFn, SmoothConvexFn]:
    return SmoothConvexFn.affine([1.0], -upper), SmoothConvexFn.affine([-1.0], lower)


def gen_economic_dispatch(
    n: int,
    quad_costs: Sequence[tuple[float, float, float]],
    bounds: Sequence[tuple[float, float]],
    b: float,
    graph: Graph,
    barrier: Optional[BarrierSpec] = None,
) -> ProblemInstance:
    """Build an economic-dispatch instance: one scalar injection per node.

    Node ``i`` minimizes ``a_i x^2 + b_i x + c_i`` on ``[l_i, u_i]`` and the
    injections must sum to ``b``.

    Raises:
        InstanceError: If the inputs admit no strictly feasible point.
    """
    if n < 1:
        raise InstanceError(f"n must be at least 1, got {n}")
    if len(quad_costs) != n or len(bounds) != n:
        raise InstanceError(f"expected {n} cost triples and bounds, got {len(quad_costs)} and {len(bounds)}")
    if graph.n != n:
        raise InstanceError(f"graph has {graph.n} vertices, expected {n}")
    for i, ((a, _, _), (lo, hi)) in enumerate(zip(quad_costs, bounds)):
        if not a > 0:
            raise InstanceError(f"node {i}: quadratic coefficient must be positive, got {a}")
        if not lo < hi:
            raise InstanceError(f"node {i}: lower bound {lo} must be below upper bound {hi}")
    total_lower = sum(lo for lo, _ in bounds)
    total_upper = sum(hi for _, hi in bounds)
    if not total_lower < b < total_upper:
        raise InstanceError(
            f"demand b={b} must lie strictly between sum of lower bounds {total_lower} "
            f"and sum of upper bounds {total_upper}"
        )

    nodes = tuple(
        NodeProblem(
            id=i,
            objective=SmoothConvexFn.quadratic([[a]], [lin], const),
            local_constraints=_box(lo, hi),
            A_in=np.zeros((0, 1)),
            A_eq=np.ones((1, 1)),
        )
        for i, ((a, lin, const), (lo, hi)) in enumerate(zip(quad_costs, bounds))
    )
    return ProblemInstance(
        nodes=nodes,
        coupling=CouplingSpec(b_in=np.zeros(0), b_eq=np.array([b], dtype=float)),
        graph=graph,
        barrier=barrier or BarrierSpec(),
        metadata={
            "family": FAMILY_DISPATCH,
            "lower": [[float(lo)] for lo, _ in bounds],
            "upper": [[float(hi)] for _, hi in bounds],
        },
    )


def role_lower_bound(role: str, cap: float) -> np.ndarray:
    """Lower bound on (renewable, coal) consumption for a role."""
    if role == ROLE_RENEWABLE:
        return np.array([-cap, 0.0])
    if role == ROLE_COAL:
        return np.array([0.0, -cap])
    if role == ROLE_CONSUMER:
        return np.zeros(2)
    raise InstanceError(f"unknown role {role!r}; expected one of {ROLES}")


def gen_multi_resource(
    n: int,
    alpha: Sequence[float],
    beta: Sequence[float],
    demand: Sequence[float],
    roles: Sequence[str],
    caps: Sequence[float],
    graph: Graph,
    barrier: Optional[BarrierSpec] = None,
) -> ProblemInstance:
    """Build a two-resource (renewable, coal) instance.

    Node ``i`` consumes ``x_i = (x_renew, x_coal)`` with disutility
    ``alpha_i (x_renew + x_coal - D_i)^2 + beta_i x_coal^2`` and ``x_i >= l_i``
    where ``l_i`` depends on the node's role; each resource nets to zero.

    Raises:
        InstanceError: On invalid parameters or when a generator kind is missing.
    """
    if n < 1:
        raise InstanceError(f"n must be at least 1, got {n}")
    for name, values in (("alpha", alpha), ("beta", beta), ("demand", demand), ("roles", roles), ("caps", caps)):
        if len(values) != n:
            raise InstanceError(f"{name}: expected {n} entries, got {len(values)}")
    if graph.n != n:
        raise InstanceError(f"graph has {graph.n} vertices, expected {n}")
    if ROLE_RENEWABLE not in roles or ROLE_COAL not in roles:
        raise InstanceError("roles must include at least one renewable-gen and one coal-gen node")

    nodes = []
    lowers = []
    ones = np.ones((2, 2))
    for i in range(n):
        if not (alpha[i] > 0 and beta[i] > 0):
            raise InstanceError(f"node {i}: alpha and beta must be positive")
        if roles[i] != ROLE_CONSUMER and not caps[i] > 0:
            raise InstanceError(f"node {i}: generator capacity must be positive")
        lower = role_lower_bound(roles[i], caps[i])
        lowers.append(lower)
        Q = alpha[i] * ones + beta[i] * np.diag([0.0, 1.0])
        q = -2.0 * alpha[i] * demand[i] * np.ones(2)
        objective = SmoothConvexFn.quadratic(Q, q, alpha[i] * demand[i] ** 2)
        constraints = tuple(
            SmoothConvexFn.affine(-np.eye(2)[k], float(lower[k])) for k in range(2)
        )
        nodes.append(
            NodeProblem(id=i, objective=objective, local_constraints=constraints, A_in=np.zeros((0, 2)), A_eq=np.eye(2))
        )

    return ProblemInstance(
        nodes=tuple(nodes),
        coupling=CouplingSpec(b_in=np.zeros(0), b_eq=np.zeros(2)),
        graph=graph,
        barrier=barrier or BarrierSpec(),
        metadata={
            "family": FAMILY_MULTI_RESOURCE,
            "lower": [lower.tolist() for lower in lowers],
            "roles": list(roles),
        },
    )


def sample_dispatch(n: int, seed: int, barrier: Optional[BarrierSpec] = None) -> ProblemInstance:
    """Synthetic dispatch instance: a in [0.5, 2], b in [0, 1], bounds [0, 5], b = 0.5 * sum(u)."""
    if n < 1:
        raise InstanceError(f"n must be at least 1, got {n}")
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.5, 2.0, size=n)
    lin = rng.uniform(0.0, 1.0, size=n)
    bounds = [(0.0, 5.0)] * n
    graph = random_connected_graph(n, rng)
    inst = gen_economic_dispatch(
        n,
        [(float(a[i]), float(lin[i]), 0.0) for i in range(n)],
        bounds,
        0.5 * 5.0 * n,
        graph,
        barrier,
    )
    inst.metadata["generator"] = {"family": FAMILY_DISPATCH, "n": n, "seed": seed}
    return inst


def sample_multi_resource(n: int, seed: int, barrier: Optional[BarrierSpec] = None) -> ProblemInstance:
    """Synthetic two-resource instance: alpha, beta in [0.5, 2], D in [0, 2], caps 5."""
    if n < 2:
        raise InstanceError(f"n must be at least 2 to hold both generator kinds, got {n}")
    rng = np.random.default_rng(seed)
    alpha = rng.uniform(0.5, 2.0, size=n)
    beta = rng.uniform(0.5, 2.0, size=n)
    demand = rng.uniform(0.0, 2.0, size=n)
    roles = [ROLES[int(k)] for k in rng.integers(0, len(ROLES), size=n)]
    # Both generator kinds are required; reassign distinct nodes when missing.
    order = [int(k) for k in rng.permutation(n)]
    for role in (ROLE_RENEWABLE, ROLE_COAL):
        if role not in roles:
            other = ROLE_COAL if role == ROLE_RENEWABLE else ROLE_RENEWABLE
            target = next(i for i in order if roles[i] != other or roles.count(other) > 1)
            roles[target] = role
    graph = random_connected_graph(n, rng)
    inst = gen_multi_resource(
        n,
        alpha.tolist(),
        beta.tolist(),
        demand.tolist(),
        roles,
        [5.0] * n,
        graph,
        barrier,
    )
    inst.metadata["generator"] = {"family": FAMILY_MULTI_RESOURCE, "n": n, "seed": seed}
    return inst
