import numpy as np
import pytest

from tabgfn.dag import build_dag
from tabgfn.envs import TOY_FLOWS, Environment, make_hypergrid, make_toy_env
from tabgfn.exceptions import EmptyDataset, IncompatibleParamsLoss, NonFiniteLoss
from tabgfn.flows import TrajectoryFlow
from tabgfn.losses import LossSpec, total_loss
from tabgfn.params import EdgeFlowParams, ForwardBackwardParams, TrajectoryBalanceParams, terminating_distribution_exact
from tabgfn.training import (
    BackwardFromData,
    EpsilonUniformMix,
    Mixture,
    OfflineReplay,
    OnPolicy,
    TrainingConfig,
    distribution_distances,
    evaluate,
    sample_training_unit,
    train,
)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainingConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainingConfig(seed=-1)
    assert TrainingConfig(loss={"kind": "db"}).loss.kind == "db"


def test_training_is_deterministic(toy):
    cfg = TrainingConfig(loss=LossSpec("tb"), steps=200, seed=9, eval_every=50)
    a = train(toy, TrajectoryBalanceParams(toy.dag), cfg)
    b = train(toy, TrajectoryBalanceParams(toy.dag), cfg)
    assert a.to_jsonl() == b.to_jsonl()
    np.testing.assert_array_equal(a.params.theta, b.params.theta)
    assert [r["step"] for r in a.records] == [50, 100, 150, 200]
    assert all(r["wall_ms"] is None for r in a.records)


def test_single_trajectory_dag_converges():
    dag = build_dag([(0, 1), (1, 2)], 3)
    env = Environment(dag, {1: 3.0})
    # only log Z learns; plain gradient steps settle where Adam keeps oscillating
    report = train(env, TrajectoryBalanceParams(dag), TrainingConfig(steps=100, optimizer="sgd"))
    assert report.loss_curve[-1] < 1e-10
    assert report.final["l1"] == 0.0


def test_uniform_exploration_probability(toy):
    params = TrajectoryBalanceParams.from_flow(TrajectoryFlow.from_mapping(toy.dag, TOY_FLOWS["markov_a"]))
    batch = EpsilonUniformMix(1.0).sample(params, toy.reward, np.random.default_rng(0), 200000)
    freq = np.mean([t == (0, 2, 4) for t in batch.to_tuples()])
    assert freq == pytest.approx(0.25, abs=0.005)


def test_backward_from_data_uniform(toy):
    params = TrajectoryBalanceParams(toy.dag)
    src = BackwardFromData([3])
    batch = src.sample(params, toy.reward, np.random.default_rng(1), 100000)
    trajs = batch.to_tuples()
    assert all(t[0] == 0 and t[-2:] == (3, 4) for t in trajs)
    freq = np.mean([t == (0, 2, 3, 4) for t in trajs])
    assert freq == pytest.approx(0.5, abs=0.01)


def test_backward_from_data_rejects_non_terminating(toy):
    with pytest.raises(ValueError):
        BackwardFromData([1]).sample(TrajectoryBalanceParams(toy.dag), toy.reward, np.random.default_rng(0), 1)
    with pytest.raises(EmptyDataset):
        BackwardFromData([])
    with pytest.raises(EmptyDataset):
        OfflineReplay([])


def test_sampled_units_match_loss_granularity(toy):
    params = ForwardBackwardParams(toy.dag)
    rng = np.random.default_rng(4)
    assert sample_training_unit(OnPolicy(), params, toy, rng)[-1] == 4
    s, t = sample_training_unit(OnPolicy(), params, toy, rng, LossSpec("db"))
    assert (s, t) in toy.dag.edge_index
    assert sample_training_unit(OnPolicy(), params, toy, rng, LossSpec("fm")) in (1, 2, 3)


def test_evaluate_perfect_and_uniform(toy):
    perfect = TrajectoryBalanceParams.from_flow(TrajectoryFlow.from_mapping(toy.dag, TOY_FLOWS["markov_a"]))
    ev = evaluate(perfect, toy)
    assert ev.l1 < 1e-12 and abs(ev.kl) < 1e-12
    assert ev.log_z_est == pytest.approx(np.log(5))
    # uniform forward policy: both routes into state 2 exit there half the time
    ev = evaluate(TrajectoryBalanceParams(toy.dag), toy)
    np.testing.assert_allclose(ev.p_terminating, [0.5, 0.5])
    assert ev.l1 == pytest.approx(0.2)
    assert ev.mode_mass == {2: 0.5, 3: 0.5, "total": 1.0}


def test_distribution_distances():
    l1, tv, kl = distribution_distances([0.5, 0.5], [1.0, 0.0])
    assert (l1, tv) == (1.0, 0.5)
    assert kl == pytest.approx(np.log(2))
    assert distribution_distances([1.0, 0.0], [0.5, 0.5])[2] == np.inf


def test_tb_learns_toy(toy):
    report = train(toy, TrajectoryBalanceParams(toy.dag), TrainingConfig(steps=3000, seed=0))
    assert report.final["l1"] < 1e-3
    assert report.final["logZ_est"] == pytest.approx(np.log(5), abs=1e-3)


def test_tb_toy_with_large_step():
    # seed 0 settles; other seeds at this rate can keep oscillating under Adam
    env = make_toy_env()
    params = TrajectoryBalanceParams(env.dag)
    train(env, params, TrainingConfig(steps=5000, batch_size=16, learning_rate=0.05, seed=0))
    assert total_loss(params, env.reward, LossSpec("tb")) < 1e-6
    p = terminating_distribution_exact(params)
    assert np.max(np.abs(p - [0.4, 0.6])) < 1e-3


@pytest.mark.parametrize(
    "source",
    [OnPolicy(), EpsilonUniformMix(0.5), BackwardFromData([2, 3]), OfflineReplay([(0, 2, 4), (0, 1, 2, 3, 4)])],
)
@pytest.mark.parametrize("kind, cls", [("fm", EdgeFlowParams), ("db", ForwardBackwardParams), ("tb", TrajectoryBalanceParams)])
def test_exact_solution_is_a_fixed_point(toy, source, kind, cls):
    params = cls.from_flow(TrajectoryFlow.from_mapping(toy.dag, TOY_FLOWS["markov_a"]))
    start = params.theta.copy()
    report = train(toy, params, TrainingConfig(loss=LossSpec(kind), steps=50, optimizer="sgd"), source)
    assert np.max(report.loss_curve) < 1e-25
    np.testing.assert_allclose(params.theta, start, atol=1e-14)


def test_adam_amplifies_rounding_at_the_optimum(toy):
    # gradients of order 1e-16 get normalized to full-size steps
    params = TrajectoryBalanceParams.from_flow(TrajectoryFlow.from_mapping(toy.dag, TOY_FLOWS["markov_a"]))
    report = train(toy, params, TrainingConfig(steps=50))
    assert report.loss_curve[0] < 1e-25
    assert report.final["l1"] < 1e-2


def test_diverging_run_raises(toy):
    cfg = TrainingConfig(steps=20, optimizer="sgd", learning_rate=1e300)
    with pytest.raises(NonFiniteLoss), np.errstate(over="ignore", invalid="ignore"):
        train(toy, TrajectoryBalanceParams(toy.dag), cfg)


def test_incompatible_params_are_rejected(toy):
    with pytest.raises(IncompatibleParamsLoss):
        train(toy, EdgeFlowParams(toy.dag), TrainingConfig(loss=LossSpec("tb"), steps=1))


def test_mixture_draws_from_every_component(toy):
    params = TrajectoryBalanceParams(toy.dag)
    mix = Mixture([(0.5, OfflineReplay([(0, 2, 4)])), (0.5, BackwardFromData([3]))])
    trajs = mix.sample(params, toy.reward, np.random.default_rng(2), 4000).to_tuples()
    share = np.mean([t == (0, 2, 4) for t in trajs])
    assert share == pytest.approx(0.5, abs=0.03)
    assert all(t == (0, 2, 4) or t[-2] == 3 for t in trajs)
    with pytest.raises(ValueError):
        Mixture([(0.0, OnPolicy())])


def test_db_with_frozen_backward_learns_small_grid():
    env = make_hypergrid(2, 3)
    params = ForwardBackwardParams(env.dag, backward_frozen=True)
    frozen = params["backward_logits"].copy()
    report = train(env, params, TrainingConfig(loss=LossSpec("db"), steps=3000, exploration_epsilon=0.1, seed=1))
    assert report.final["l1"] < 0.05
    np.testing.assert_array_equal(params["backward_logits"], frozen)


def test_tb_skips_zero_reward_trajectories(toy):
    env = toy.with_reward(np.array([0, 0, 0.0, 1.0, 0]))
    report = train(env, TrajectoryBalanceParams(toy.dag), TrainingConfig(steps=30, seed=3))
    assert report.excluded_zero_reward > 0
