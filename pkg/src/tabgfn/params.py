"""Tabular log-space parametrizations of Markovian flows.

Every parametrization keeps its numbers in one flat vector ``theta`` with
named slices, so optimizers and gradient checks can treat all four kinds the
same way.
"""
from __future__ import annotations

import numpy as np

from .dag import ForwardPolicy, PointedDag, as_reward_vector, enumerate_complete_trajectories, trajectory_edge_ids
from .exceptions import RewardUnavailable, TabGFNError
from .flows import FlowSummary, TrajectoryFlow, summarize
from .sampling import sample_forward, terminating_distribution


def grouped_log_softmax(logits, groups, num_groups):
    """log softmax of ``logits`` within each group; empty or all -inf groups
    become uniform."""
    logits = np.asarray(logits, dtype=float)
    if logits.size == 0:
        return logits.copy()
    top = np.full(num_groups, -np.inf)
    np.maximum.at(top, groups, logits)
    dead = ~np.isfinite(top)
    top[dead] = 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        shifted = logits - top[groups]
        total = np.bincount(groups, weights=np.exp(shifted), minlength=num_groups)
        out = shifted - np.log(total)[groups]
    if dead.any():
        size = np.bincount(groups, minlength=num_groups)
        hit = dead[groups]
        out[hit] = -np.log(size[groups[hit]])
    return out


class TabularParams:
    """Base class: a flat parameter vector plus named views into it."""

    kind = "abstract"
    fields: tuple = ()

    def __init__(self, dag: PointedDag, theta=None, frozen=()):
        self.dag = dag
        self.layout = {}
        start = 0
        for name in self.fields:
            size = self._field_size(name)
            self.layout[name] = slice(start, start + size)
            start += size
        if theta is None:
            theta = np.zeros(start)
        theta = np.array(theta, dtype=float)
        if theta.shape != (start,):
            raise ValueError(f"{self.kind} expects {start} parameters, got shape {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("parameters must be finite")
        self.theta = theta
        self.frozen = frozenset(frozen)
        unknown = self.frozen - set(self.fields)
        if unknown:
            raise ValueError(f"unknown fields {sorted(unknown)}")

    def _field_size(self, name):
        raise NotImplementedError

    def __getitem__(self, name):
        return self.theta[self.layout[name]]

    def __setitem__(self, name, value):
        self.theta[self.layout[name]] = value

    def __repr__(self):
        return f"{type(self).__name__}(dag={self.dag!r}, size={self.theta.size})"

    def copy(self):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.theta = self.theta.copy()
        return new

    def trainable_mask(self):
        mask = np.ones(self.theta.size, dtype=bool)
        for name in self.frozen:
            mask[self.layout[name]] = False
        return mask

    def coordinate_names(self):
        """(field, index) label for every entry of ``theta``."""
        out = []
        for name in self.fields:
            sl = self.layout[name]
            out += [(name, i) for i in range(sl.stop - sl.start)]
        return out

    def identifiable_mask(self):
        """Trainable coordinates that can change the induced objects.

        Logits in a softmax group of size one have no effect and are excluded.
        """
        return self.trainable_mask()

    # subclasses provide log P_F per edge and a log-Z estimate
    def log_forward(self, reward=None) -> np.ndarray:
        raise NotImplementedError

    def log_z_estimate(self, reward=None) -> float:
        raise NotImplementedError


class EdgeFlowParams(TabularParams):
    """log F(s -> s') on inner edges; exit flows are pinned to the reward."""

    kind = "edge_flow"
    fields = ("log_edge_flow",)

    def _field_size(self, name):
        return len(self.dag.nonterminating_edges)

    @property
    def log_edge_flow(self):
        return self["log_edge_flow"]

    def all_log_edge_flows(self, reward):
        if reward is None:
            raise RewardUnavailable("edge-flow parametrization needs terminal rewards")
        r = as_reward_vector(self.dag, reward)
        out = np.empty(self.dag.num_edges)
        out[self.dag.nonterminating_edges] = self.log_edge_flow
        term = list(self.dag.terminating_edges)
        with np.errstate(divide="ignore"):
            out[term] = np.log(r[self.dag.edge_src[term]])
        return out

    def log_forward(self, reward=None):
        return grouped_log_softmax(self.all_log_edge_flows(reward), self.dag.edge_src, self.dag.num_states)

    def log_z_estimate(self, reward=None):
        lf = self.all_log_edge_flows(reward)
        ids = list(self.dag.child_edges[self.dag.source])
        return float(np.logaddexp.reduce(lf[ids]))

    @classmethod
    def from_flow(cls, flow):
        s = _as_summary(flow)
        ef = s.edge_flow[s.dag.nonterminating_edges]
        return cls(s.dag, _safe_log(ef, "edge flows"))


class ForwardParams(TabularParams):
    """log F(s) for every non-sink state plus forward logits per edge."""

    kind = "forward"
    fields = ("log_state_flow", "forward_logits")

    def _field_size(self, name):
        if name == "log_state_flow":
            return self.dag.num_states - 1
        if name == "forward_logits":
            return self.dag.num_edges
        return len(self.dag.nonterminating_edges)

    @property
    def log_state_flow(self):
        return self["log_state_flow"]

    @property
    def forward_logits(self):
        return self["forward_logits"]

    def log_forward(self, reward=None):
        return grouped_log_softmax(self.forward_logits, self.dag.edge_src, self.dag.num_states)

    def log_z_estimate(self, reward=None):
        return float(self.log_state_flow[self.dag.source])

    def identifiable_mask(self):
        mask = self.trainable_mask()
        _mask_singletons(mask, self.layout["forward_logits"], self.dag.edge_src, self.dag.num_states)
        return mask

    @classmethod
    def from_flow(cls, flow, **kwargs):
        s = _as_summary(flow)
        p = cls(s.dag, **kwargs)
        p["log_state_flow"] = _safe_log(s.state_flow[:-1], "state flows")
        p["forward_logits"] = _safe_log(s.p_forward.probs, "forward probabilities")
        return p


class _BackwardMixin:
    def log_backward(self):
        """log P_B(s|s') on inner edges, normalized over the parents of s'."""
        dag = self.dag
        inner = dag.nonterminating_edges
        return grouped_log_softmax(self["backward_logits"], dag.edge_dst[inner], dag.num_states)

    def backward_probs_full(self):
        """P_B per edge over the whole DAG; rows at the sink are zero."""
        out = np.zeros(self.dag.num_edges)
        out[self.dag.nonterminating_edges] = np.exp(self.log_backward())
        return out

    @property
    def backward_logits(self):
        return self["backward_logits"]

    @property
    def backward_frozen(self):
        return "backward_logits" in self.frozen

    def _mask_backward(self, mask):
        dag = self.dag
        _mask_singletons(mask, self.layout["backward_logits"], dag.edge_dst[dag.nonterminating_edges], dag.num_states)


class ForwardBackwardParams(_BackwardMixin, ForwardParams):
    """Forward parametrization plus learnable (or frozen) backward logits."""

    kind = "forward_backward"
    fields = ("log_state_flow", "forward_logits", "backward_logits")

    def __init__(self, dag, theta=None, backward_frozen=False, frozen=()):
        frozen = set(frozen) | ({"backward_logits"} if backward_frozen else set())
        super().__init__(dag, theta, frozen)

    def identifiable_mask(self):
        mask = super().identifiable_mask()
        self._mask_backward(mask)
        return mask

    @classmethod
    def from_flow(cls, flow, backward_frozen=False):
        s = _as_summary(flow)
        p = super().from_flow(s, backward_frozen=backward_frozen)
        p["backward_logits"] = _safe_log(s.p_backward.probs[s.dag.nonterminating_edges], "backward probabilities")
        return p


class TrajectoryBalanceParams(_BackwardMixin, TabularParams):
    """log Z, forward logits and (optionally frozen) backward logits."""

    kind = "trajectory_balance"
    fields = ("log_Z", "forward_logits", "backward_logits")

    def __init__(self, dag, theta=None, backward_frozen=False, frozen=()):
        frozen = set(frozen) | ({"backward_logits"} if backward_frozen else set())
        super().__init__(dag, theta, frozen)

    def _field_size(self, name):
        if name == "log_Z":
            return 1
        if name == "forward_logits":
            return self.dag.num_edges
        return len(self.dag.nonterminating_edges)

    @property
    def log_Z(self):
        return float(self.theta[self.layout["log_Z"]][0])

    @log_Z.setter
    def log_Z(self, value):
        self["log_Z"] = value

    @property
    def forward_logits(self):
        return self["forward_logits"]

    def log_forward(self, reward=None):
        return grouped_log_softmax(self.forward_logits, self.dag.edge_src, self.dag.num_states)

    def log_z_estimate(self, reward=None):
        return self.log_Z

    def identifiable_mask(self):
        mask = self.trainable_mask()
        _mask_singletons(mask, self.layout["forward_logits"], self.dag.edge_src, self.dag.num_states)
        self._mask_backward(mask)
        return mask

    @classmethod
    def from_flow(cls, flow, backward_frozen=False):
        s = _as_summary(flow)
        p = cls(s.dag, backward_frozen=backward_frozen)
        p.log_Z = np.log(s.total_flow_Z)
        p["forward_logits"] = _safe_log(s.p_forward.probs, "forward probabilities")
        p["backward_logits"] = _safe_log(s.p_backward.probs[s.dag.nonterminating_edges], "backward probabilities")
        return p


PARAM_KINDS = {
    cls.kind: cls for cls in (EdgeFlowParams, ForwardParams, ForwardBackwardParams, TrajectoryBalanceParams)
}


def make_params(kind: str, dag: PointedDag, backward_frozen: bool = False) -> TabularParams:
    """Zero-initialized parameters: uniform policies, unit flows, log Z = 0."""
    try:
        cls = PARAM_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown parametrization {kind!r}; choose from {sorted(PARAM_KINDS)}") from None
    if cls in (ForwardBackwardParams, TrajectoryBalanceParams):
        return cls(dag, backward_frozen=backward_frozen)
    return cls(dag)


def _mask_singletons(mask, sl, groups, num_groups):
    size = np.bincount(groups, minlength=num_groups)
    mask[sl] &= size[groups] > 1


def _as_summary(flow) -> FlowSummary:
    return flow if isinstance(flow, FlowSummary) else summarize(flow)


def _safe_log(x, what):
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError(f"cannot take logs of non-positive or undefined {what}")
    return np.log(x)


# ---------------------------------------------------------------------------
# operations shared by all kinds


def induced_forward_policy(params: TabularParams, reward=None) -> ForwardPolicy:
    probs = np.exp(params.log_forward(reward))
    # exp of a log-softmax is normalized only up to rounding
    sums = np.bincount(params.dag.edge_src, weights=probs, minlength=params.dag.num_states)
    return ForwardPolicy(params.dag, probs / sums[params.dag.edge_src])


def sample_trajectory(params: TabularParams, reward, rng) -> tuple:
    pf = induced_forward_policy(params, reward).probs
    return sample_forward(params.dag, pf, rng, 1).to_tuples()[0]


def sample_trajectories(params: TabularParams, reward, rng, n: int, epsilon: float = 0.0):
    pf = induced_forward_policy(params, reward).probs
    return sample_forward(params.dag, pf, rng, n, epsilon=epsilon)


def terminating_distribution_exact(params: TabularParams, reward=None) -> np.ndarray:
    """P_T over ``dag.terminating_states`` via the forward reach DP."""
    return terminating_distribution(params.dag, induced_forward_policy(params, reward).probs)


def to_markovian_flow(params: TabularParams, reward=None) -> TrajectoryFlow:
    """exp(log Z estimate) times the trajectory law of the forward policy."""
    dag = params.dag
    pf = induced_forward_policy(params, reward).probs
    z = float(np.exp(params.log_z_estimate(reward)))
    trajs = enumerate_complete_trajectories(dag)
    values = np.array([z * np.prod(pf[trajectory_edge_ids(dag, t)]) for t in trajs])
    return TrajectoryFlow(dag, values, trajs)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = "tabgfn-checkpoint 1"


class CheckpointError(TabGFNError, ValueError):
    pass


def dump_checkpoint(params: TabularParams) -> str:
    lines = [
        CHECKPOINT_MAGIC,
        f"kind {params.kind}",
        f"dag {params.dag.fingerprint()}",
        "frozen " + (",".join(sorted(params.frozen)) or "-"),
    ]
    for (name, i), value in zip(params.coordinate_names(), params.theta):
        lines.append(f"{name} {i} {float(value)!r}")
    return "\n".join(lines) + "\n"


def load_checkpoint(text: str, dag: PointedDag) -> TabularParams:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a tabgfn checkpoint")
    header = dict(ln.split(" ", 1) for ln in lines[1:4])
    kind = header.get("kind")
    if kind not in PARAM_KINDS:
        raise CheckpointError(f"unknown parametrization {kind!r}")
    if header.get("dag") != dag.fingerprint():
        raise CheckpointError("checkpoint was written for a different DAG")
    frozen = () if header.get("frozen", "-") == "-" else tuple(header["frozen"].split(","))
    params = make_params(kind, dag)
    params.frozen = frozenset(frozen)
    for ln in lines[4:]:
        name, i, value = ln.split()
        sl = params.layout[name]
        params.theta[sl.start + int(i)] = float(value)
    return params


def save_checkpoint(path, params):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_checkpoint(params))


def read_checkpoint(path, dag):
    with open(path, encoding="utf-8") as fh:
        return load_checkpoint(fh.read(), dag)
