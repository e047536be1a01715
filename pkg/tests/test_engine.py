import numpy as np
import pytest

from src.engine import EngineState, ReallocationEngine, RhsShare, StopRule
from src.errors import InitializationError
from src.localsolve import primal_value
from src.model import (
    BarrierSpec,
    CouplingSpec,
    NodeProblem,
    ProblemInstance,
    SmoothConvexFn,
    barrier_objective,
    gen_economic_dispatch,
    sample_dispatch,
    sample_multi_resource,
)
from src.network import Graph, UpdateSet, VotingSelector, voting_message_count
from src.oracle import solve_centralized_barrier, solve_centralized_original


def dispatch(costs, bounds, b, graph, c=1e-3):
    quad = [(a, lin, 0.0) for a, lin in costs]
    return gen_economic_dispatch(len(costs), quad, bounds, b, graph, BarrierSpec(kind="log", c=c))


@pytest.fixture
def symmetric_pair():
    """Two identical nodes on [0, 2] sharing b = 2."""
    return dispatch([(1.0, 0.0)] * 2, [(0.0, 2.0)] * 2, 2.0, Graph.path(2))


@pytest.fixture
def path10():
    rng = np.random.default_rng(4)
    costs = [(float(a), float(lin)) for a, lin in zip(rng.uniform(0.5, 2.0, 10), rng.uniform(0.0, 1.0, 10))]
    return dispatch(costs, [(0.0, 5.0)] * 10, 25.0, Graph.path(10), c=1e-6)


# Stop rules


def test_stop_rule_parse():
    assert StopRule.parse(None) == StopRule()
    assert StopRule.parse("none").kind == "none"
    assert StopRule.parse("residual:1e-8") == StopRule(kind="residual", tol=1e-8)
    assert StopRule.parse("plateau:1e-12:20") == StopRule(kind="plateau", tol=1e-12, window=20)
    assert StopRule.parse("plateau:1e-12").window == 50


@pytest.mark.parametrize("text", ["residual", "residual:abc", "plateau:1e-3:x", "sometimes:1", "residual:-1"])
def test_stop_rule_parse_rejects_malformed(text):
    with pytest.raises(ValueError):
        StopRule.parse(text)


def test_stop_rule_str_roundtrip():
    for text in ("none", "residual:1e-08", "plateau:1e-10:30"):
        assert str(StopRule.parse(text)) == text


# Initialization


def test_even_split_symmetric_pair(symmetric_pair):
    shares = ReallocationEngine(symmetric_pair).init_even_split()
    assert [s.y_eq[0] for s in shares] == pytest.approx([1.0, 1.0])


def test_even_split_shifts_by_lower_bounds():
    inst = dispatch([(1.0, 0.0)] * 3, [(0.0, 5.0), (1.0, 5.0), (2.0, 5.0)], 6.0, Graph.path(3))
    shares = ReallocationEngine(inst).init_even_split()
    assert [s.y_eq[0] for s in shares] == pytest.approx([1.0, 2.0, 3.0])


def test_even_split_multi_resource_sums_to_zero():
    inst = sample_multi_resource(8, seed=2)
    shares = ReallocationEngine(inst).init_even_split()
    total = sum(s.y_eq for s in shares)
    np.testing.assert_allclose(total, np.zeros(2), atol=1e-12)


def test_even_split_without_metadata_divides_b():
    inst = dispatch([(1.0, 0.0)] * 4, [(0.0, 5.0)] * 4, 8.0, Graph.path(4))
    bare = ProblemInstance(nodes=inst.nodes, coupling=inst.coupling, graph=inst.graph, barrier=inst.barrier)
    shares = ReallocationEngine(bare).init_even_split()
    assert [s.y_eq[0] for s in shares] == pytest.approx([2.0] * 4)


def test_even_split_rejects_infeasible_share():
    """Node 1 lives on (3, 5); an even split of 4 gives it 2."""
    inst = dispatch([(1.0, 0.0)] * 2, [(0.0, 5.0), (3.0, 5.0)], 4.0, Graph.path(2))
    bare = ProblemInstance(nodes=inst.nodes, coupling=inst.coupling, graph=inst.graph, barrier=inst.barrier)
    with pytest.raises(InitializationError, match="from-point"):
        ReallocationEngine(bare).init_even_split()


def test_init_from_point_reads_shares(symmetric_pair):
    shares = ReallocationEngine(symmetric_pair).init_from_point([np.array([0.5]), np.array([1.5])])
    assert [s.y_eq[0] for s in shares] == pytest.approx([0.5, 1.5])


def test_init_from_point_rejects_coupling_violation(symmetric_pair):
    with pytest.raises(InitializationError, match="coupling equalities"):
        ReallocationEngine(symmetric_pair).init_from_point([np.array([0.5]), np.array([1.0])])


def test_init_from_point_rejects_boundary_point(symmetric_pair):
    with pytest.raises(InitializationError, match="strictly inside"):
        ReallocationEngine(symmetric_pair).init_from_point([np.array([0.0]), np.array([2.0])])


def test_init_from_point_rejects_inequality_rows():
    node = NodeProblem(
        id=0,
        objective=SmoothConvexFn.quadratic([[1.0]], [0.0]),
        local_constraints=(SmoothConvexFn.affine([1.0], -2.0), SmoothConvexFn.affine([-1.0], 0.0)),
        A_in=np.array([[1.0]]),
    )
    inst = ProblemInstance(nodes=(node,), coupling=CouplingSpec(b_in=np.array([1.0])), graph=Graph.from_edges(1, []))
    with pytest.raises(InitializationError, match="inequality coupling rows"):
        ReallocationEngine(inst).init_from_point([np.array([0.5])])


def test_from_point_falls_back_to_slater_point(symmetric_pair):
    engine = ReallocationEngine(symmetric_pair)
    state = engine.initial_state("from-point")
    total = sum(share.y_eq for share in state.y)
    assert total[0] == pytest.approx(2.0, abs=1e-10)


def test_unknown_init_strategy(symmetric_pair):
    with pytest.raises(InitializationError, match="unknown init strategy"):
        ReallocationEngine(symmetric_pair).initial_state("random")


def test_init_x_solves_every_node(symmetric_pair):
    engine = ReallocationEngine(symmetric_pair)
    state = engine.init_x(engine.init_even_split())
    assert state.k == 0
    assert [xi[0] for xi in state.x] == pytest.approx([1.0, 1.0])
    expected = sum(
        barrier_objective(node, symmetric_pair.barrier).value(np.array([1.0]))
        for node in symmetric_pair.nodes
    )
    assert engine.record(state).sum_F == pytest.approx(expected)
    assert float(np.sum(state.phi)) == pytest.approx(expected)


def test_init_x_rejects_wrong_share_count(symmetric_pair):
    with pytest.raises(InitializationError, match="expected 2 shares"):
        ReallocationEngine(symmetric_pair).init_x([RhsShare(y_in=np.zeros(0), y_eq=np.array([2.0]))])


# Steps


def test_one_step_on_complete_pair_reaches_barrier_optimum():
    inst = dispatch([(1.0, 0.0), (2.0, 0.0)], [(0.0, 5.0)] * 2, 3.0, Graph.complete(2))
    engine = ReallocationEngine(inst)
    state = engine.initial_state("even")
    state, record = engine.step(state, UpdateSet.of(0))
    optimum = solve_centralized_barrier(inst)
    assert record.sum_F == pytest.approx(optimum.value, rel=1e-6)
    assert state.x[0][0] == pytest.approx(optimum.x_star[0][0], abs=1e-6)


def test_symmetric_step_is_a_fixed_point():
    inst = dispatch([(1.0, 0.0)] * 3, [(0.0, 2.0)] * 3, 3.0, Graph.path(3))
    engine = ReallocationEngine(inst)
    state = engine.initial_state("even")
    after, _ = engine.step(state, UpdateSet.of(1))
    for before_x, after_x in zip(state.x, after.x):
        assert after_x[0] == pytest.approx(before_x[0], abs=1e-8)
    for before_y, after_y in zip(state.y, after.y):
        assert after_y.y_eq[0] == pytest.approx(before_y.y_eq[0], abs=1e-8)


def test_step_conserves_neighborhood_shares(path10):
    engine = ReallocationEngine(path10)
    state = engine.initial_state("even")
    scope = path10.graph.closed(4)
    before = sum(state.y[j].y_eq[0] for j in scope)
    after_state, _ = engine.step(state, UpdateSet.of(4))
    after = sum(after_state.y[j].y_eq[0] for j in scope)
    assert after == pytest.approx(before, abs=1e-12)
    untouched = [j for j in range(10) if j not in scope]
    for j in untouched:
        assert after_state.y[j] is state.y[j]


def test_step_never_increases_sum_phi(path10):
    engine = ReallocationEngine(path10)
    state = engine.initial_state("even")
    for leaders in ([0, 5], [2, 8], [4], [1, 7]):
        new_state, _ = engine.step(state, UpdateSet.of(*leaders))
        assert float(np.sum(new_state.phi)) <= float(np.sum(state.phi)) + 1e-8
        state = new_state


def test_step_counts_messages(path10):
    engine = ReallocationEngine(path10)
    state = engine.initial_state("even")
    _, record = engine.step(state, UpdateSet.of(0, 5))
    # voting on the path plus 2 (|N_i| - 1) per leader: node 0 has one neighbor, node 5 two
    assert record.messages == voting_message_count(path10.graph) + 2 * 1 + 2 * 2
    assert record.num_leaders == 2


def test_residual_vanishes_right_after_a_step(path10):
    engine = ReallocationEngine(path10)
    state = engine.initial_state("even")
    state, _ = engine.step(state, UpdateSet.of(3))
    assert engine.residual(state, 3) <= 1e-8


def test_residual_is_zero_on_symmetric_fixed_point():
    inst = dispatch([(1.0, 0.0)] * 2, [(0.0, 2.0)] * 2, 2.0, Graph.path(2))
    engine = ReallocationEngine(inst)
    state = engine.initial_state("even")
    assert engine.residuals(state) == pytest.approx([0.0, 0.0], abs=1e-8)


# Runs


def test_single_node_run_stops_immediately():
    inst = dispatch([(1.0, 0.0)], [(0.0, 2.0)], 1.0, Graph.from_edges(1, []))
    result = ReallocationEngine(inst).run(max_iters=10, stop=StopRule.parse("residual:1e-8"))
    assert result.stopped_by == "residual"
    assert len(result.trace) == 1
    assert result.state.k == 0


def test_run_reaches_optimum_on_path(path10):
    f_star = solve_centralized_original(path10).value
    result = ReallocationEngine(path10).run(max_iters=2000, seed=1)
    rel = abs(result.trace[-1].sum_f - f_star) / abs(f_star)
    assert rel <= 1e-4
    assert max(record.feas_eq_err for record in result.trace) <= 1e-8


def test_run_is_deterministic(path10):
    a = ReallocationEngine(path10).run(max_iters=40, seed=3)
    b = ReallocationEngine(path10).run(max_iters=40, seed=3)
    assert [r.update_set for r in a.trace] == [r.update_set for r in b.trace]
    assert [r.sum_phi for r in a.trace] == [r.sum_phi for r in b.trace]
    assert [r.sum_f for r in a.trace] == [r.sum_f for r in b.trace]


def test_run_keeps_every_iterate_feasible():
    inst = sample_multi_resource(10, seed=1)
    engine = ReallocationEngine(inst)
    result = engine.run(max_iters=60, seed=0)
    for record in result.trace:
        assert record.feas_eq_err <= 1e-8
    report = engine.audit_feasibility(result.state)
    assert report.ok, report.summary()


def test_run_records_and_counts(path10):
    seen = []
    result = ReallocationEngine(path10).run(max_iters=25, seed=0, on_record=seen.append)
    assert len(result.trace) == 26
    assert seen == result.trace
    assert result.trace[0].k == 0
    assert result.trace[-1].k == 25
    assert int(result.leader_counts.sum()) == sum(r.num_leaders for r in result.trace[1:])
    assert result.total_messages == sum(r.messages for r in result.trace)
    assert result.mean_update_size >= 1.0


def test_run_with_residual_column(path10):
    result = ReallocationEngine(path10).run(max_iters=10, seed=0, residual_every=5)
    with_residual = [r.k for r in result.trace if r.residual_sum is not None]
    assert with_residual == [0, 5, 10]
    assert all(r.residual_sum >= 0 for r in result.trace if r.residual_sum is not None)


def test_run_plateau_stop(path10):
    result = ReallocationEngine(path10).run(max_iters=5000, seed=0, stop=StopRule.parse("plateau:1e-12:10"))
    assert result.stopped_by == "plateau"
    assert result.state.k < 5000


def test_run_rejects_zero_budget(symmetric_pair):
    with pytest.raises(ValueError, match="max_iters"):
        ReallocationEngine(symmetric_pair).run(max_iters=0)


def test_run_accepts_custom_selector(path10):
    class FixedSelector:
        def select(self):
            return UpdateSet.of(2, 7)

    result = ReallocationEngine(path10).run(max_iters=3, selector=FixedSelector())
    assert all(r.update_set == UpdateSet.of(2, 7) for r in result.trace[1:])
    assert result.leader_counts[2] == 3


# Audits


def test_audit_passes_on_run_state(path10):
    engine = ReallocationEngine(path10)
    result = engine.run(max_iters=30, seed=2)
    report = engine.audit_feasibility(result.state)
    assert report.ok, report.summary()
    assert report["conservation"].magnitude <= 1e-10


def test_audit_detects_corrupted_share(symmetric_pair):
    engine = ReallocationEngine(symmetric_pair)
    state = engine.initial_state("even")
    shares = list(state.y)
    shares[0] = RhsShare(y_in=np.zeros(0), y_eq=shares[0].y_eq + 1.0)
    corrupted = EngineState(k=state.k, x=state.x, y=tuple(shares), phi=state.phi, u=state.u)
    report = engine.audit_feasibility(corrupted)
    assert report["conservation"].status == "fail"
    assert report["share_feasibility"].status == "fail"
    assert not report.ok


def test_audit_detects_boundary_point(symmetric_pair):
    engine = ReallocationEngine(symmetric_pair)
    state = engine.initial_state("even")
    corrupted = EngineState(
        k=state.k, x=(np.array([0.0]), np.array([2.0])), y=state.y, phi=state.phi, u=state.u
    )
    report = engine.audit_feasibility(corrupted)
    assert report["interiority"].status == "fail"
    assert report["consistency"].status == "skipped"


# Properties over several instances


def capacity_instance(n=4, cap=3.0, c=1e-4):
    """Nodes on [0, 2] pulled towards targets whose total exceeds the shared cap."""
    targets = np.random.default_rng(7).uniform(1.0, 1.8, n)
    nodes = tuple(
        NodeProblem(
            id=i,
            objective=SmoothConvexFn.quadratic([[1.0]], [-2.0 * t], t * t),
            local_constraints=(SmoothConvexFn.affine([1.0], -2.0), SmoothConvexFn.affine([-1.0], 0.0)),
            A_in=np.array([[1.0]]),
        )
        for i, t in enumerate(targets)
    )
    return ProblemInstance(
        nodes=nodes,
        coupling=CouplingSpec(b_in=np.array([cap])),
        graph=Graph.path(n),
        barrier=BarrierSpec(kind="log", c=c),
    )


INSTANCES = {
    "capacity": lambda: capacity_instance(),
    "dispatch-0": lambda: sample_dispatch(8, seed=0),
    "dispatch-1": lambda: sample_dispatch(8, seed=1),
    "dispatch-2": lambda: sample_dispatch(8, seed=2),
    "multi-resource-0": lambda: sample_multi_resource(6, seed=0),
    "multi-resource-1": lambda: sample_multi_resource(6, seed=1),
}


def test_inequality_coupling_run_stays_feasible():
    inst = capacity_instance()
    engine = ReallocationEngine(inst)
    result = engine.run(max_iters=40, seed=0)
    for record in result.trace:
        assert record.feas_in_err <= 1e-8
    state = result.state
    total = sum(share.y_in for share in state.y)
    assert total[0] == pytest.approx(3.0, abs=1e-10)
    for node, share, xi in zip(inst.nodes, state.y, state.x):
        assert float((share.y_in - node.A_in @ xi)[0]) >= 0.0
    assert result.trace[-1].sum_phi < result.trace[0].sum_phi


@pytest.mark.parametrize("name", sorted(INSTANCES))
def test_every_iterate_passes_the_audit(name):
    inst = INSTANCES[name]()
    engine = ReallocationEngine(inst)
    selector = VotingSelector(inst.graph, seed=5)
    state = engine.initial_state("even")
    report = engine.audit_feasibility(state)
    assert report.ok, report.summary()
    for _ in range(25):
        previous = float(np.sum(state.phi))
        state, record = engine.step(state, selector.select())
        report = engine.audit_feasibility(state)
        assert report.ok, f"k={state.k}: {report.summary()}"
        assert record.sum_phi <= previous + 1e-8


@pytest.mark.parametrize("name", ["capacity", "dispatch-0", "multi-resource-1"])
def test_residual_stop_lands_on_barrier_optimum(name):
    inst = INSTANCES[name]()
    f_star = solve_centralized_barrier(inst).value
    result = ReallocationEngine(inst).run(max_iters=3000, seed=0, stop=StopRule.parse("residual:1e-9"))
    assert result.stopped_by == "residual"
    assert result.trace[-1].sum_phi == pytest.approx(f_star, abs=1e-6 * (1.0 + abs(f_star)))
    assert result.trace[-1].sum_phi >= f_star - 1e-8 * (1.0 + abs(f_star))


@pytest.mark.parametrize("name", ["dispatch-1", "multi-resource-0"])
def test_neighborhood_shares_one_multiplier_after_a_step(name):
    inst = INSTANCES[name]()
    engine = ReallocationEngine(inst)
    state = engine.initial_state("even")
    leader = 2
    state, _ = engine.step(state, UpdateSet.of(leader))
    shared = state.u[leader]
    for j in inst.graph.closed(leader):
        own = primal_value(inst.nodes[j], inst.barrier, state.y[j])
        assert own.converged
        np.testing.assert_allclose(own.multiplier, shared, rtol=1e-6, atol=1e-8)


def test_leader_order_within_an_iteration_does_not_matter(path10):
    engine = ReallocationEngine(path10)
    start = engine.initial_state("even")
    together, _ = engine.step(start, UpdateSet.of(2, 7))
    late_first, _ = engine.step(engine.step(start, UpdateSet.of(7))[0], UpdateSet.of(2))
    early_first, _ = engine.step(engine.step(start, UpdateSet.of(2))[0], UpdateSet.of(7))
    for other in (late_first, early_first):
        for a, b in zip(together.x, other.x):
            np.testing.assert_allclose(a, b, atol=1e-12)
        for a, b in zip(together.y, other.y):
            np.testing.assert_allclose(a.stacked, b.stacked, atol=1e-12)
        np.testing.assert_allclose(together.phi, other.phi, atol=1e-12)
