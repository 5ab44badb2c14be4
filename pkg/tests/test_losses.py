import math

import numpy as np
import pytest

import oracles
from tabgfn.dag import build_dag, enumerate_complete_trajectories
from tabgfn.envs import TOY_FLOWS, make_hypergrid
from tabgfn.exceptions import IncompatibleParamsLoss, ZeroRewardOnTrajectory
from tabgfn.flows import TrajectoryFlow, flow_from_terminating_and_backward
from tabgfn.losses import (
    LossSpec,
    all_units,
    db_loss_at_edge,
    fm_loss_at_state,
    loss_and_gradient,
    loss_gradient,
    tb_loss_at_trajectory,
    total_loss,
)
from tabgfn.params import (
    EdgeFlowParams,
    ForwardBackwardParams,
    TrajectoryBalanceParams,
    terminating_distribution_exact,
)

REWARD = {2: 2.0, 3: 3.0}
LN2_SQ = math.log(2) ** 2
CLASSES = {"fm": EdgeFlowParams, "db": ForwardBackwardParams, "tb": TrajectoryBalanceParams}


@pytest.fixture
def markov_a(toy):
    return TrajectoryFlow.from_mapping(toy.dag, TOY_FLOWS["markov_a"])


@pytest.fixture
def chain():
    return build_dag([(0, 1), (1, 2)], 3)


def random_params(cls, dag, rng, **kw):
    size = cls(dag, **kw).theta.size
    return cls(dag, rng.normal(scale=0.7, size=size), **kw)


def test_loss_spec_validation():
    assert LossSpec("TB").kind == "tb"
    assert LossSpec("db").granularity == "edge"
    with pytest.raises(ValueError):
        LossSpec("xx")
    with pytest.raises(ValueError):
        LossSpec("fm", delta=-1)


def test_fm_zero_at_exact_flow(markov_a):
    params = EdgeFlowParams.from_flow(markov_a)
    for s in range(4):
        assert fm_loss_at_state(params, REWARD, s) < 1e-30


@pytest.mark.parametrize("delta, expected", [(0.0, LN2_SQ), (1.0, math.log(1.5) ** 2)])
def test_fm_chain_values(chain, delta, expected):
    params = EdgeFlowParams(chain, [math.log(2.0)])
    assert fm_loss_at_state(params, {1: 1.0}, 1, delta) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.480453 if delta == 0 else 0.164402, abs=1e-6)


def test_fm_source_term_is_optional(chain):
    params = EdgeFlowParams(chain, [math.log(2.0)])
    assert fm_loss_at_state(params, {1: 1.0}, 0) == 0.0
    # source has no in-flow: (1 / (1 + 2))^2 in log space
    assert fm_loss_at_state(params, {1: 1.0}, 0, delta=1.0, include_source=True) == pytest.approx(math.log(3) ** 2)


def test_fm_zero_over_zero_is_zero():
    # with finite log-flows only the source term can have zero in-flow
    dag = build_dag([(0, 1)], 2)
    params = EdgeFlowParams(dag)
    assert fm_loss_at_state(params, {0: 0.0}, 0, include_source=True) == 0.0
    assert fm_loss_at_state(params, {0: 1.0}, 0, include_source=True) == np.inf


def test_db_zero_at_exact_flow(markov_a, toy):
    params = ForwardBackwardParams.from_flow(markov_a)
    for e in toy.dag.edges:
        assert db_loss_at_edge(params, REWARD, e) < 1e-30


def test_db_inner_edge_value(chain):
    params = ForwardBackwardParams(chain)
    params["log_state_flow"] = [0.0, math.log(2.0)]
    assert db_loss_at_edge(params, {1: 2.0}, (0, 1)) == pytest.approx(LN2_SQ, rel=1e-12)
    assert db_loss_at_edge(params, {1: 2.0}, (1, 2)) == pytest.approx(0.0, abs=1e-30)


def test_tb_chain_value_and_gradient(chain):
    params = TrajectoryBalanceParams(chain)
    params.log_Z = math.log(2.0)
    assert tb_loss_at_trajectory(params, {1: 1.0}, (0, 1, 2)) == pytest.approx(LN2_SQ, rel=1e-12)
    grad = loss_gradient(params, {1: 1.0}, (0, 1, 2), LossSpec("tb"))
    assert grad[params.layout["log_Z"]][0] == pytest.approx(2 * math.log(2), rel=1e-12)


def test_tb_zero_at_exact_flow(markov_a):
    params = TrajectoryBalanceParams.from_flow(markov_a)
    for t in markov_a.trajectories:
        assert tb_loss_at_trajectory(params, REWARD, t) < 1e-30
        np.testing.assert_allclose(loss_gradient(params, REWARD, t, LossSpec("tb")), 0.0, atol=1e-12)


def test_tb_zero_reward_is_flagged(toy):
    params = TrajectoryBalanceParams(toy.dag)
    with pytest.raises(ZeroRewardOnTrajectory):
        tb_loss_at_trajectory(params, {2: 0.0, 3: 1.0}, (0, 2, 4))


def test_incompatible_params():
    dag = build_dag([(0, 1)], 2)
    with pytest.raises(IncompatibleParamsLoss):
        loss_and_gradient(EdgeFlowParams(dag), {0: 1.0}, LossSpec("tb"), all_units(EdgeFlowParams(dag), LossSpec("fm")))


def test_fm_total_positive_after_doubling_an_edge(markov_a, toy):
    params = EdgeFlowParams.from_flow(markov_a)
    assert total_loss(params, REWARD, LossSpec("fm")) < 1e-30
    params["log_edge_flow"][0] += math.log(2)
    assert total_loss(params, REWARD, LossSpec("fm")) > 0


def test_tb_total_is_sum_over_trajectories(toy, rng):
    params = random_params(TrajectoryBalanceParams, toy.dag, rng)
    per = [tb_loss_at_trajectory(params, REWARD, t) for t in enumerate_complete_trajectories(toy.dag)]
    assert total_loss(params, REWARD, LossSpec("tb")) == pytest.approx(sum(per), rel=1e-12)


def test_losses_match_direct_formulas(toy, rng):
    dag = toy.dag
    sink = dag.sink
    fm = random_params(EdgeFlowParams, dag, rng)
    ef = dict(zip(dag.edges, np.exp(fm.all_log_edge_flows(REWARD))))
    inner = {e: f for e, f in ef.items() if e[1] != sink}
    for s in range(1, 4):
        for delta in (0.0, 0.3):
            assert fm_loss_at_state(fm, REWARD, s, delta) == pytest.approx(oracles.fm_direct(inner, REWARD, s, delta), rel=1e-10)

    db = random_params(ForwardBackwardParams, dag, rng)
    sf = np.append(np.exp(db["log_state_flow"]), np.nan)
    pf = dict(zip(dag.edges, np.exp(db.log_forward())))
    pb = dict(zip(dag.edges, db.backward_probs_full()))
    for e in dag.edges:
        for delta in (0.0, 0.3):
            assert db_loss_at_edge(db, REWARD, e, delta) == pytest.approx(
                oracles.db_direct(sf, pf, pb, REWARD, e, sink, delta), rel=1e-10
            )

    tb = random_params(TrajectoryBalanceParams, dag, rng)
    pf = dict(zip(dag.edges, np.exp(tb.log_forward())))
    pb = dict(zip(dag.edges, tb.backward_probs_full()))
    for t in enumerate_complete_trajectories(dag):
        assert tb_loss_at_trajectory(tb, REWARD, t) == pytest.approx(
            oracles.tb_direct(math.exp(tb.log_Z), pf, pb, REWARD, t), rel=1e-10
        )


@pytest.mark.parametrize("kind", ["fm", "db", "tb"])
@pytest.mark.parametrize("delta", [0.0, 0.5])
def test_gradients_match_finite_differences(kind, delta, rng):
    env = make_hypergrid(2, 3)
    spec = LossSpec(kind, delta=delta)
    params = random_params(CLASSES[kind], env.dag, rng)
    units = all_units(params, spec)
    _, grad = loss_and_gradient(params, env.reward, spec, units)

    def f(theta):
        p = params.copy()
        p.theta[:] = theta
        return float(loss_and_gradient(p, env.reward, spec, units)[0].sum())

    for i in range(params.theta.size):
        fd = oracles.central_difference(f, params.theta, i)
        assert abs(fd - grad[i]) <= 1e-5 * max(1.0, abs(fd)), (i, fd, grad[i])


def test_batch_gradient_is_sum_of_unit_gradients(toy, rng):
    params = random_params(ForwardBackwardParams, toy.dag, rng)
    spec = LossSpec("db")
    edges = np.array([0, 3, 3, 5])
    _, grad = loss_and_gradient(params, REWARD, spec, edges)
    by_unit = sum(loss_gradient(params, REWARD, int(e), spec) for e in edges)
    np.testing.assert_allclose(grad, by_unit, atol=1e-14)


@pytest.mark.parametrize("a, b", [(0.5, 3.0), (4.0, 1e-3), (0.0, 2.0)])
def test_delta_shrinks_log_ratio(a, b):
    vals = [abs(math.log((d + a) / (d + b))) for d in (1e-3, 0.1, 1.0, 10.0)]
    assert all(x >= y for x, y in zip(vals, vals[1:]))


def _exact_params(kind, env):
    dag = env.dag
    pb = 1.0 / np.bincount(dag.edge_dst, minlength=dag.num_states)[dag.edge_dst]
    flow = flow_from_terminating_and_backward(dag, env.terminal_rewards(), pb)
    return CLASSES[kind].from_flow(flow)


@pytest.mark.parametrize("kind", ["fm", "db", "tb"])
@pytest.mark.parametrize("grid", [(2, 2), (3, 2)])
def test_zero_loss_implies_target_distribution(kind, grid):
    env = make_hypergrid(*grid)
    params = _exact_params(kind, env)
    assert total_loss(params, env.reward, LossSpec(kind)) < 1e-16
    p = terminating_distribution_exact(params, env.reward)
    np.testing.assert_allclose(p, env.terminal_rewards() / env.Z, atol=1e-6)
