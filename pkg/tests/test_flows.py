import json

import numpy as np
import pytest

import oracles
from tabgfn.dag import build_dag, trajectory_probability
from tabgfn.envs import TOY_FLOWS, make_hypergrid
from tabgfn.exceptions import InconsistentPolicy, ZeroIntermediateFlow
from tabgfn.flows import (
    TrajectoryFlow,
    check_detailed_balance,
    check_flow_matching,
    factorized_values,
    flow_from_backward,
    flow_from_forward,
    flow_from_terminating_and_backward,
    is_markovian,
    markovian_projection,
    summarize,
)

MARKOV_A = [4 / 5, 6 / 5, 6 / 5, 9 / 5]


def values_in_table_order(flow):
    order = [(0, 2, 4), (0, 1, 2, 4), (0, 2, 3, 4), (0, 1, 2, 3, 4)]
    return [flow[t] for t in order]


def test_summary_of_nonmarkov_flow(toy_flow):
    s = summarize(toy_flow("nonmarkov_a"))
    dag = s.dag
    expected = {(0, 1): 3, (0, 2): 2, (1, 2): 3, (2, 3): 3, (2, 4): 2, (3, 4): 3}
    for e, f in expected.items():
        assert s.edge_flow[dag.edge_index[e]] == f
    assert s.total_flow_Z == 5
    assert s.state_flow[0] == s.state_flow[4] == 5
    np.testing.assert_allclose(s.p_terminating, [2 / 5, 3 / 5], atol=1e-15)


def test_summary_matches_oracle(toy_flow):
    flow = toy_flow("nonmarkov_b")
    s = summarize(flow)
    ef = oracles.edge_flows(flow.trajectories, flow.values)
    sf = oracles.state_flows(flow.trajectories, flow.values)
    for e, i in s.dag.edge_index.items():
        assert s.edge_flow[i] == pytest.approx(ef[e], abs=1e-12)
    for st, f in sf.items():
        assert s.state_flow[st] == pytest.approx(f, abs=1e-12)


def test_single_trajectory_summary():
    dag = build_dag([(0, 1)], 2)
    s = summarize(TrajectoryFlow(dag, [7.0]))
    assert s.total_flow_Z == 7
    assert s.p_terminating.tolist() == [1.0]


def test_equivalent_flows_share_edge_flows(toy_flow):
    a, b = summarize(toy_flow("nonmarkov_a")), summarize(toy_flow("markov_a"))
    np.testing.assert_allclose(a.edge_flow, b.edge_flow, atol=1e-12)
    np.testing.assert_allclose(a.state_flow, b.state_flow, atol=1e-12)


def test_summary_json_is_serializable(toy_flow):
    json.dumps(summarize(toy_flow("markov_a")).to_json())


def test_zero_flow_conditionals_are_undefined(toy):
    flow = TrajectoryFlow.from_mapping(toy.dag, {(0, 2, 4): 1.0})
    s = summarize(flow)
    assert 1 in s.undefined_states and 3 in s.undefined_states
    assert np.isnan(s.p_forward.probs[toy.dag.edge_index[(1, 2)]])


@pytest.mark.parametrize("name", ["markov_a", "markov_b"])
def test_markovian_flows_pass(toy_flow, name):
    assert is_markovian(toy_flow(name))


@pytest.mark.parametrize("name", ["nonmarkov_a", "nonmarkov_b"])
def test_nonmarkovian_flows_fail_with_witness(toy_flow, name):
    flow = toy_flow(name)
    check = is_markovian(flow)
    assert not check
    fac = dict(zip(flow.trajectories, oracles.forward_factorized(flow.trajectories, flow.values)))
    assert check.flow_value == flow[check.trajectory]
    assert check.factorized_value == pytest.approx(fac[check.trajectory], rel=1e-12)
    assert abs(check.flow_value - check.factorized_value) > 0.1


def test_listed_witness_value(toy_flow):
    # (0, 1, 2, 4) carries 1 but factorizes to 5 * 3/5 * 1 * 2/5
    flow = toy_flow("nonmarkov_a")
    fac = dict(zip(flow.trajectories, factorized_values(flow)))
    assert fac[(0, 1, 2, 4)] == pytest.approx(6 / 5, abs=1e-12)


def test_single_trajectory_is_markovian():
    dag = build_dag([(0, 1), (1, 2)], 3)
    assert is_markovian(TrajectoryFlow(dag, [2.5]))


@pytest.mark.parametrize(
    "source, expected",
    [("nonmarkov_a", MARKOV_A), ("nonmarkov_b", [6 / 5, 4 / 5, 9 / 5, 6 / 5]), ("markov_a", MARKOV_A)],
)
def test_projection_values(toy_flow, source, expected):
    proj = markovian_projection(toy_flow(source))
    assert np.max(np.abs(np.array(values_in_table_order(proj)) - expected)) <= 1e-12
    assert is_markovian(proj)


def test_projection_matches_oracle_product(toy_flow):
    flow = toy_flow("nonmarkov_b")
    proj = markovian_projection(flow)
    np.testing.assert_allclose(proj.values, oracles.projected_values(flow.trajectories, flow.values), atol=1e-14)


def test_projection_raises_on_zero_intermediate_flow(toy):
    flow = TrajectoryFlow.from_mapping(toy.dag, {(0, 2, 4): 1.0})
    with pytest.raises(ZeroIntermediateFlow) as info:
        markovian_projection(flow)
    assert info.value.state in (1, 3)
    # the lenient factorization just reports zero there
    assert factorized_values(flow).tolist() == [0.0, 0.0, 0.0, 1.0]


def test_flow_from_forward_reproduces_markov_flow(toy):
    pf = summarize(TrajectoryFlow.from_mapping(toy.dag, TOY_FLOWS["markov_a"])).p_forward
    flow = flow_from_forward(toy.dag, 5.0, pf)
    np.testing.assert_allclose(values_in_table_order(flow), MARKOV_A, atol=1e-12)


def test_flow_from_forward_single_edge():
    dag = build_dag([(0, 1)], 2)
    assert flow_from_forward(dag, 3.0, np.array([1.0])).values.tolist() == [3.0]
    with pytest.raises(ValueError):
        flow_from_forward(dag, 0.0, np.array([1.0]))


def test_flow_from_backward(toy):
    pb = summarize(TrajectoryFlow.from_mapping(toy.dag, TOY_FLOWS["markov_a"])).p_backward
    flow = flow_from_backward(toy.dag, 5.0, pb)
    np.testing.assert_allclose(values_in_table_order(flow), MARKOV_A, atol=1e-12)


def test_flow_from_terminating_and_backward(toy):
    pb = {(0, 2): 2 / 5, (1, 2): 3 / 5, (0, 1): 1.0, (2, 3): 1.0}
    flow = flow_from_terminating_and_backward(toy.dag, {2: 2.0, 3: 3.0}, pb)
    np.testing.assert_allclose(values_in_table_order(flow), MARKOV_A, atol=1e-12)
    s = summarize(flow)
    assert s.total_flow_Z == pytest.approx(5.0)
    np.testing.assert_allclose(s.terminating_flows(), [2.0, 3.0], atol=1e-12)


def test_flow_from_terminating_rejects_bad_policy(toy):
    with pytest.raises(InconsistentPolicy):
        flow_from_terminating_and_backward(toy.dag, {2: 2.0, 3: 3.0}, {(0, 2): 0.9, (1, 2): 0.9, (0, 1): 1, (2, 3): 1})
    with pytest.raises(ValueError):
        flow_from_terminating_and_backward(toy.dag, {2: 0.0, 3: 0.0}, {(0, 2): 0.5, (1, 2): 0.5, (0, 1): 1, (2, 3): 1})


def test_markov_flow_forward_and_backward_factorizations_agree(toy_flow):
    s = summarize(toy_flow("markov_b"))
    for t in toy_flow("markov_b").trajectories:
        assert trajectory_probability(s.p_forward, t) == pytest.approx(trajectory_probability(s.p_backward, t), rel=1e-12)


def test_flow_matching_check(toy_flow):
    s = summarize(toy_flow("nonmarkov_a"))
    assert check_flow_matching(s.dag, s.state_flow, s.edge_flow)
    bad = s.state_flow.copy()
    bad[2] = 5.1
    check = check_flow_matching(s.dag, bad, s.edge_flow)
    assert not check and check.worst == 2


def test_flow_matching_on_hypergrid_exact_flow():
    env = make_hypergrid(2, 3)
    dag = env.dag
    pb = 1.0 / np.bincount(dag.edge_dst, minlength=dag.num_states)[dag.edge_dst]
    s = summarize(flow_from_terminating_and_backward(dag, env.terminal_rewards(), pb))
    assert check_flow_matching(dag, s.state_flow, s.edge_flow)


def test_detailed_balance_check(toy_flow, toy):
    s = summarize(toy_flow("markov_a"))
    reward = {2: 2.0, 3: 3.0}
    assert check_detailed_balance(toy.dag, s.state_flow, s.p_forward, s.p_backward, reward)
    pb = s.p_backward.probs.copy()
    i01, i12 = toy.dag.edge_index[(0, 2)], toy.dag.edge_index[(1, 2)]
    pb[i12] += 0.1
    pb[[i01, i12]] /= pb[[i01, i12]].sum()
    check = check_detailed_balance(toy.dag, s.state_flow, s.p_forward, pb, reward)
    assert not check
    assert check.worst in {(0, 2), (1, 2)}
    # the perturbed edge itself violates the condition
    lhs = s.state_flow[1] * s.p_forward.probs[i12]
    rhs = s.state_flow[2] * pb[i12]
    assert abs(lhs - rhs) > 0.1


def test_detailed_balance_single_edge():
    dag = build_dag([(0, 1)], 2)
    assert check_detailed_balance(dag, np.array([4.0, 4.0]), np.array([1.0]), np.array([1.0]), {0: 4.0})
