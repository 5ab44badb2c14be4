"""Stochastic-gradient training of tabular parametrizations."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .envs import Environment
from .exceptions import EmptyDataset, NonFiniteLoss
from .losses import LossSpec, check_compatible, loss_and_gradient
from .params import TabularParams, _BackwardMixin, induced_forward_policy
from .sampling import Adjacency, TrajectoryBatch, sample_backward, sample_forward, terminating_distribution

logger = logging.getLogger(__name__)

REPORT_FIELDS = ("step", "loss_mean", "l1", "kl", "logZ_est", "wall_ms")


@dataclass
class TrainingConfig:
    loss: LossSpec = field(default_factory=LossSpec)
    steps: int = 1000
    batch_size: int = 16
    learning_rate: float = 1e-2
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    exploration_epsilon: float = 0.0
    seed: int = 0
    eval_every: int = 100
    log_z_lr_multiplier: float = 10.0
    reward_exponent: float = 1.0
    stochastic_reward: bool = False
    record_wall_time: bool = False

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossSpec(**self.loss)
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if not 0.0 <= self.exploration_epsilon <= 1.0:
            raise ValueError("exploration_epsilon must lie in [0, 1]")
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("steps >= 0, batch_size >= 1 and eval_every >= 1 are required")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


# ---------------------------------------------------------------------------
# training distributions


def _forward_probs(params, reward):
    lp = params.log_forward(reward)
    p = np.exp(lp)
    sums = np.bincount(params.dag.edge_src, weights=p, minlength=params.dag.num_states)
    return p / sums[params.dag.edge_src]


@dataclass(frozen=True)
class OnPolicy:
    """Roll out the current forward policy."""

    def sample(self, params, reward, rng, n):
        return sample_forward(params.dag, _forward_probs(params, reward), rng, n)


@dataclass(frozen=True)
class EpsilonUniformMix:
    """Each forward step is uniform over children with probability ``epsilon``."""

    epsilon: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")

    def sample(self, params, reward, rng, n):
        return sample_forward(params.dag, _forward_probs(params, reward), rng, n, epsilon=self.epsilon)


@dataclass(frozen=True)
class OfflineReplay:
    """Uniform draws, with replacement, from a fixed list of complete trajectories."""

    trajectories: tuple

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(tuple(t) for t in self.trajectories))
        if not self.trajectories:
            raise EmptyDataset("offline replay needs at least one trajectory")

    def sample(self, params, reward, rng, n):
        idx = rng.integers(0, len(self.trajectories), size=n)
        return TrajectoryBatch.from_tuples(params.dag, [self.trajectories[i] for i in idx])


@dataclass(frozen=True)
class BackwardFromData:
    """Start at a dataset terminating state and walk a backward policy to the source.

    With ``backward_policy=None`` the parametrization's own P_B is used when it
    has one, uniform-over-parents otherwise.
    """

    states: tuple
    backward_policy: object = None
    weights: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(int(s) for s in self.states))
        if not self.states:
            raise EmptyDataset("backward sampling needs at least one terminating state")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (len(self.states),) or np.any(w < 0) or not w.sum() > 0:
                raise ValueError("weights must be non-negative, one per state, not all zero")
            object.__setattr__(self, "weights", tuple(w / w.sum()))

    def _backward_probs(self, params):
        dag = params.dag
        if self.backward_policy is not None:
            probs = getattr(self.backward_policy, "probs", self.backward_policy)
            return np.asarray(probs, dtype=float)
        if isinstance(params, _BackwardMixin):
            return params.backward_probs_full()
        adj = Adjacency.of(dag)
        return 1.0 / adj.in_degree[dag.edge_dst]

    def sample(self, params, reward, rng, n):
        for s in self.states:
            if not params.dag.is_terminating(s):
                raise ValueError(f"state {s} is not terminating")
        starts = rng.choice(np.array(self.states), size=n, p=self.weights)
        return sample_backward(params.dag, self._backward_probs(params), starts, rng)


@dataclass(frozen=True)
class Mixture:
    """Per batch slot, pick a component source with the given probabilities."""

    components: tuple

    def __post_init__(self):
        comps = tuple((float(w), src) for w, src in self.components)
        if not comps or any(w < 0 for w, _ in comps) or not sum(w for w, _ in comps) > 0:
            raise ValueError("mixture weights must be non-negative and not all zero")
        object.__setattr__(self, "components", comps)

    def sample(self, params, reward, rng, n):
        w = np.array([c[0] for c in self.components])
        picks = rng.choice(len(w), size=n, p=w / w.sum())
        counts = np.bincount(picks, minlength=len(w))
        parts = [src.sample(params, reward, rng, int(k)) for (_, src), k in zip(self.components, counts) if k]
        return TrajectoryBatch.concatenate(params.dag, parts)


def units_from_batch(batch: TrajectoryBatch, spec: LossSpec):
    """Loss units covered by a batch of trajectories."""
    dag = batch.dag
    edges = batch.edges[batch.edges >= 0]
    if spec.kind == "tb":
        return batch
    if spec.kind == "db":
        return edges
    heads = dag.edge_dst[edges]
    states = heads[heads != dag.sink]
    if spec.include_source:
        states = np.concatenate([np.full(len(batch), dag.source, dtype=np.intp), states])
    return states


def sample_training_unit(source, params: TabularParams, env: Environment, rng, spec: LossSpec | None = None):
    """One draw from the training distribution.

    Returns a trajectory tuple for TB (or when ``spec`` is None), an ``(s, s')``
    edge for DB and a state id for FM, picked uniformly along the trajectory.
    """
    traj = source.sample(params, env.reward, rng, 1).to_tuples()[0]
    if spec is None or spec.kind == "tb":
        return traj
    if spec.kind == "db":
        k = int(rng.integers(0, len(traj) - 1))
        return traj[k], traj[k + 1]
    inner = traj[1:-1] if not spec.include_source else traj[:-1]
    if not inner:
        return traj[0]
    return int(inner[int(rng.integers(0, len(inner)))])


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalRecord:
    l1: float
    tv: float
    kl: float
    log_z_est: float
    p_terminating: np.ndarray
    target: np.ndarray
    mode_mass: dict

    def to_json(self, dag):
        return {
            "l1": self.l1,
            "tv": self.tv,
            "kl": self.kl,
            "logZ_est": self.log_z_est,
            "mode_mass": {str(k): v for k, v in self.mode_mass.items()},
            "p_terminating": {str(s): float(p) for s, p in zip(dag.terminating_states, self.p_terminating)},
        }


def distribution_distances(p, target):
    """(L1, TV, KL(target || p)) with KL over the support of the target."""
    p = np.asarray(p, dtype=float)
    target = np.asarray(target, dtype=float)
    l1 = float(np.abs(p - target).sum())
    support = target > 0
    if np.any(p[support] <= 0):
        kl = float("inf")
    else:
        kl = float(np.sum(target[support] * np.log(target[support] / p[support])))
    return l1, 0.5 * l1, kl


def evaluate(params: TabularParams, env: Environment, reward=None, mode_fraction=0.5) -> EvalRecord:
    """Exact P_T of the learned forward policy against R / Z.

    Modes are terminating states whose reward is at least ``mode_fraction``
    of the maximum.
    """
    reward = env.reward if reward is None else reward
    dag = params.dag
    r = np.asarray(reward, dtype=float)[list(dag.terminating_states)]
    target = r / r.sum()
    p = terminating_distribution(dag, induced_forward_policy(params, reward).probs)
    l1, tv, kl = distribution_distances(p, target)
    modes = np.flatnonzero(r >= mode_fraction * r.max())
    mass = {int(dag.terminating_states[k]): float(p[k]) for k in modes}
    mass["total"] = float(p[modes].sum())
    return EvalRecord(l1, tv, kl, float(params.log_z_estimate(reward)), p, target, mass)


# ---------------------------------------------------------------------------
# optimization


@dataclass
class TrainingReport:
    records: list
    loss_curve: np.ndarray
    params: TabularParams
    config: TrainingConfig
    excluded_zero_reward: int = 0

    @property
    def final(self):
        return self.records[-1] if self.records else None

    def to_jsonl(self) -> str:
        return "".join(json.dumps({k: rec[k] for k in REPORT_FIELDS}) + "\n" for rec in self.records)

    def write_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


class _Optimizer:
    def __init__(self, config: TrainingConfig, params: TabularParams):
        self.config = config
        self.mask = params.trainable_mask()
        self.lr = np.full(params.theta.size, config.learning_rate)
        if "log_Z" in params.layout:
            self.lr[params.layout["log_Z"]] *= config.log_z_lr_multiplier
        self.m = np.zeros(params.theta.size)
        self.v = np.zeros(params.theta.size)
        self.t = 0

    def step(self, theta, grad):
        grad = np.where(self.mask, grad, 0.0)
        c = self.config
        if c.optimizer == "sgd":
            theta -= self.lr * grad
            return
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * grad * grad
        m_hat = self.m / (1 - c.beta1**self.t)
        v_hat = self.v / (1 - c.beta2**self.t)
        theta -= self.lr * m_hat / (np.sqrt(v_hat) + c.adam_eps)


def _drop_zero_reward(batch, reward):
    keep = np.asarray(reward)[batch.terminal_states()] > 0
    if keep.all():
        return batch, 0
    return TrajectoryBatch(batch.dag, batch.edges[keep]), int((~keep).sum())


def train(env: Environment, params: TabularParams, config: TrainingConfig, source=None) -> TrainingReport:
    """Minimize the configured loss by stochastic gradients; ``params`` is updated in place.

    Evaluation rows are recorded every ``config.eval_every`` steps and at the
    final step.  Runs are bit-reproducible for a fixed seed; ``wall_ms`` is
    null unless ``config.record_wall_time`` is set.
    """
    spec = config.loss
    check_compatible(params, spec)
    if source is None:
        source = EpsilonUniformMix(config.exploration_epsilon) if config.exploration_epsilon > 0 else OnPolicy()
    rng = np.random.default_rng(config.seed)
    reward = env.reward ** config.reward_exponent if config.reward_exponent != 1.0 else env.reward
    opt = _Optimizer(config, params)
    sampled_rewards = config.stochastic_reward and env.reward_sampler is not None

    curve = np.empty(config.steps)
    records = []
    excluded = 0
    start = time.perf_counter()
    for step in range(config.steps):
        batch = source.sample(params, reward, rng, config.batch_size)
        if spec.kind == "tb":
            batch, dropped = _drop_zero_reward(batch, reward)
            excluded += dropped
        units = units_from_batch(batch, spec)
        n_units = len(units)
        if n_units == 0:
            curve[step] = 0.0
            continue
        log_reward = _sampled_log_reward(env, units, spec, config, rng) if sampled_rewards else None
        losses, grad = loss_and_gradient(params, reward, spec, units, log_reward=log_reward)
        loss_mean = float(losses.mean())
        if not np.isfinite(loss_mean) or not np.all(np.isfinite(grad)):
            raise NonFiniteLoss(step, f"{spec.kind} loss mean {loss_mean}")
        opt.step(params.theta, grad / n_units)
        curve[step] = loss_mean

        if (step + 1) % config.eval_every == 0 or step + 1 == config.steps:
            ev = evaluate(params, env, reward)
            records.append(
                {
                    "step": step + 1,
                    "loss_mean": loss_mean,
                    "l1": ev.l1,
                    "kl": ev.kl,
                    "logZ_est": ev.log_z_est,
                    "wall_ms": round((time.perf_counter() - start) * 1e3, 3) if config.record_wall_time else None,
                }
            )
            logger.debug("step %d loss %.3e l1 %.3e", step + 1, loss_mean, ev.l1)
    if excluded:
        logger.warning("excluded %d zero-reward trajectories from TB batches", excluded)
    return TrainingReport(records, curve, params, config, excluded)


def _sampled_log_reward(env, units, spec, config, rng):
    dag = env.dag
    if spec.kind == "tb":
        states = units.terminal_states()
        vals = env.sample_reward(states, rng)
    elif spec.kind == "db":
        src = dag.edge_src[units]
        vals = np.ones(len(units))
        term = dag.is_terminating_edge[units]
        vals[term] = env.sample_reward(src[term], rng)
    else:
        return None
    with np.errstate(divide="ignore"):
        return config.reward_exponent * np.log(vals)


def config_to_dict(config: TrainingConfig):
    d = asdict(config)
    d["loss"] = asdict(config.loss)
    return d
