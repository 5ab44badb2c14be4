"""Exact flow measures over enumerated trajectory spaces."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .dag import (
    DEFAULT_TRAJECTORY_CAP,
    BackwardPolicy,
    ForwardPolicy,
    PointedDag,
    as_backward_policy,
    as_forward_policy,
    as_reward_vector,
    enumerate_complete_trajectories,
    trajectory_edge_ids,
)
from .exceptions import InconsistentPolicy, ZeroIntermediateFlow

DEFAULT_TOL = 1e-9


def close(a, b, tol=DEFAULT_TOL):
    """Relative comparison with an absolute floor of one."""
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def _rel_violation(a, b):
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


class TrajectoryFlow:
    """Non-negative measure over complete trajectories.

    ``values[i]`` is the flow of ``trajectories[i]``, where trajectories are in
    the lexicographic order produced by
    :func:`~tabgfn.dag.enumerate_complete_trajectories`.
    """

    def __init__(self, dag: PointedDag, values, trajectories=None, cap=DEFAULT_TRAJECTORY_CAP):
        self.dag = dag
        self.trajectories = (
            list(trajectories) if trajectories is not None else enumerate_complete_trajectories(dag, cap)
        )
        values = np.asarray(values, dtype=float)
        if values.shape != (len(self.trajectories),):
            raise ValueError(f"expected {len(self.trajectories)} trajectory values, got shape {values.shape}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("trajectory flows must be finite and non-negative")
        if not np.any(values > 0):
            raise ValueError("a flow needs at least one trajectory with positive value")
        self.values = values
        self._incidence = None

    @classmethod
    def from_mapping(cls, dag: PointedDag, mapping: Mapping, cap=DEFAULT_TRAJECTORY_CAP):
        trajs = enumerate_complete_trajectories(dag, cap)
        known = set(trajs)
        bad = [t for t in mapping if tuple(t) not in known]
        if bad:
            raise ValueError(f"not complete trajectories of this DAG: {bad}")
        values = [float(mapping.get(t, 0.0)) for t in trajs]
        return cls(dag, values, trajs)

    def as_mapping(self):
        return dict(zip(self.trajectories, self.values.tolist()))

    def __getitem__(self, traj):
        return self.values[self.trajectories.index(tuple(traj))]

    def __repr__(self):
        return f"TrajectoryFlow({len(self.trajectories)} trajectories, Z={self.values.sum():g})"

    @property
    def incidence(self):
        """(trajectory ids, edge ids) for every step of every trajectory."""
        if self._incidence is None:
            ids = [trajectory_edge_ids(self.dag, t) for t in self.trajectories]
            traj_ids = np.repeat(np.arange(len(ids)), [len(i) for i in ids])
            self._incidence = (traj_ids, np.concatenate(ids))
        return self._incidence


@dataclass(frozen=True, eq=False)
class FlowSummary:
    """State and edge flows of a trajectory flow and the derived conditionals.

    Conditionals at zero-flow states are NaN (undefined); ``p_terminating`` is
    indexed like ``dag.terminating_states``.
    """

    dag: PointedDag
    state_flow: np.ndarray
    edge_flow: np.ndarray
    total_flow_Z: float
    p_forward: ForwardPolicy
    p_backward: BackwardPolicy
    p_terminating: np.ndarray

    @property
    def undefined_states(self):
        return tuple(int(s) for s in np.flatnonzero(self.state_flow == 0))

    def terminating_flows(self):
        return self.edge_flow[list(self.dag.terminating_edges)]

    def to_json(self):
        d = self.dag
        return {
            "total_flow_Z": self.total_flow_Z,
            "state_flow": self.state_flow.tolist(),
            "edge_flow": {f"{u}->{v}": float(f) for (u, v), f in zip(d.edges, self.edge_flow)},
            "p_terminating": {str(s): float(p) for s, p in zip(d.terminating_states, self.p_terminating)},
        }


def _edge_flows(flow: TrajectoryFlow):
    traj_ids, edge_ids = flow.incidence
    edge_flow = np.zeros(flow.dag.num_edges)
    np.add.at(edge_flow, edge_ids, flow.values[traj_ids])
    return edge_flow


def _conditionals(dag, state_flow, edge_flow):
    with np.errstate(invalid="ignore", divide="ignore"):
        denom_f = state_flow[dag.edge_src]
        denom_b = state_flow[dag.edge_dst]
        pf = np.where(denom_f > 0, edge_flow / np.where(denom_f > 0, denom_f, 1.0), np.nan)
        pb = np.where(denom_b > 0, edge_flow / np.where(denom_b > 0, denom_b, 1.0), np.nan)
    # rounding can leave rows a few ulps off; renormalize defined rows
    pf = _renormalize(pf, dag.edge_src, dag.num_states)
    pb = _renormalize(pb, dag.edge_dst, dag.num_states)
    return ForwardPolicy(dag, pf), BackwardPolicy(dag, pb)


def _renormalize(p, key, n):
    sums = np.zeros(n)
    np.add.at(sums, key, np.nan_to_num(p))
    with np.errstate(invalid="ignore"):
        return p / sums[key]


def summarize(flow: TrajectoryFlow) -> FlowSummary:
    """State flows, edge flows, Z and the forward/backward/terminating probabilities."""
    dag = flow.dag
    traj_ids, edge_ids = flow.incidence
    edge_flow = _edge_flows(flow)
    total = float(flow.values.sum())

    state_flow = np.zeros(dag.num_states)
    # every state of a trajectory except the source is the head of one step
    np.add.at(state_flow, dag.edge_dst[edge_ids], flow.values[traj_ids])
    state_flow[dag.source] = total

    pf, pb = _conditionals(dag, state_flow, edge_flow)
    p_term = edge_flow[list(dag.terminating_edges)] / total
    return FlowSummary(dag, state_flow, edge_flow, total, pf, pb, p_term)


def _product_formula(flow: TrajectoryFlow, edge_flow, state_flow, strict):
    """prod of edge flows / prod of intermediate state flows, per trajectory."""
    dag = flow.dag
    out = np.empty(len(flow.trajectories))
    for i, traj in enumerate(flow.trajectories):
        ids = trajectory_edge_ids(dag, traj)
        inner = traj[1:-1]
        inner_flow = state_flow[list(inner)] if inner else np.ones(0)
        if np.any(inner_flow == 0):
            if strict:
                raise ZeroIntermediateFlow(int(inner[int(np.argmin(inner_flow))]))
            out[i] = 0.0
            continue
        out[i] = np.prod(edge_flow[ids]) / np.prod(inner_flow)
    return out


@dataclass(frozen=True)
class MarkovCheck:
    markovian: bool
    trajectory: tuple | None = None
    flow_value: float | None = None
    factorized_value: float | None = None

    def __bool__(self):
        return self.markovian


def is_markovian(flow: TrajectoryFlow, tol: float = DEFAULT_TOL) -> MarkovCheck:
    """Check F(tau) = Z * prod P_F along every complete trajectory.

    On failure the witness is the trajectory with the largest relative gap.
    """
    factorized = factorized_values(flow)
    viol = _rel_violation(flow.values, factorized)
    i = int(np.argmax(viol))
    if viol[i] <= tol:
        return MarkovCheck(True)
    return MarkovCheck(False, flow.trajectories[i], float(flow.values[i]), float(factorized[i]))


def factorized_values(flow: TrajectoryFlow) -> np.ndarray:
    """Z * prod P_F for every trajectory; zero where the path carries no flow."""
    summary = summarize(flow)
    return _product_formula(flow, summary.edge_flow, summary.state_flow, strict=False)


def markovian_projection(flow: TrajectoryFlow) -> TrajectoryFlow:
    """The unique Markovian flow with the same edge flows as ``flow``."""
    summary = summarize(flow)
    values = _product_formula(flow, summary.edge_flow, summary.state_flow, strict=True)
    return TrajectoryFlow(flow.dag, values, flow.trajectories)


def flow_from_forward(dag: PointedDag, Z: float, p_forward) -> TrajectoryFlow:
    if not Z > 0:
        raise ValueError("Z must be positive")
    pf = as_forward_policy(dag, p_forward)
    trajs = enumerate_complete_trajectories(dag)
    values = [Z * float(np.prod(pf.probs[trajectory_edge_ids(dag, t)])) for t in trajs]
    return TrajectoryFlow(dag, values, trajs)


def flow_from_backward(dag: PointedDag, Z: float, p_backward) -> TrajectoryFlow:
    if not Z > 0:
        raise ValueError("Z must be positive")
    pb = as_backward_policy(dag, p_backward)
    trajs = enumerate_complete_trajectories(dag)
    values = [Z * float(np.prod(pb.probs[trajectory_edge_ids(dag, t)])) for t in trajs]
    return TrajectoryFlow(dag, values, trajs)


def flow_from_terminating_and_backward(dag: PointedDag, terminating_flows, p_backward) -> TrajectoryFlow:
    """Markovian flow fixed by its terminating edge flows and P_B off the sink.

    ``p_backward`` is a per-edge array (or mapping, or BackwardPolicy) whose
    entries on terminating edges are ignored.
    """
    term = as_reward_vector(dag, terminating_flows)[list(dag.terminating_states)]
    z_hat = float(term.sum())
    if not z_hat > 0:
        raise ValueError("terminating flows must not all be zero")
    if isinstance(p_backward, BackwardPolicy):
        probs = np.array(p_backward.probs)
    elif isinstance(p_backward, Mapping):
        probs = np.zeros(dag.num_edges)
        for (s, t), p in p_backward.items():
            probs[dag.edge_index[(s, t)]] = p
    else:
        probs = np.array(p_backward, dtype=float)
    if probs.shape != (dag.num_edges,):
        raise InconsistentPolicy("backward table must cover every edge")
    probs[list(dag.terminating_edges)] = term / z_hat
    return flow_from_backward(dag, z_hat, BackwardPolicy(dag, probs))


@dataclass(frozen=True)
class ConditionCheck:
    ok: bool
    worst: object = None
    violation: float = 0.0

    def __bool__(self):
        return self.ok


def check_flow_matching(dag: PointedDag, state_flow, edge_flow, tol: float = DEFAULT_TOL) -> ConditionCheck:
    """In-flow = state flow (non-source) and state flow = out-flow (non-sink)."""
    state_flow = np.asarray(state_flow, dtype=float)
    edge_flow = np.asarray(edge_flow, dtype=float)
    inflow = np.zeros(dag.num_states)
    outflow = np.zeros(dag.num_states)
    np.add.at(inflow, dag.edge_dst, edge_flow)
    np.add.at(outflow, dag.edge_src, edge_flow)
    viol = np.zeros(dag.num_states)
    viol[1:] = _rel_violation(state_flow[1:], inflow[1:])
    viol[:-1] = np.maximum(viol[:-1], _rel_violation(state_flow[:-1], outflow[:-1]))
    worst = int(np.argmax(viol))
    return ConditionCheck(bool(viol[worst] <= tol), worst, float(viol[worst]))


def check_detailed_balance(
    dag: PointedDag, state_flow, p_forward, p_backward, reward, tol: float = DEFAULT_TOL
) -> ConditionCheck:
    """F(s) P_F(s'|s) = F(s') P_B(s|s') on inner edges, F(s) P_F(s_f|s) = R(s) on exits.

    Edges whose conditionals are undefined (NaN) are skipped.
    """
    state_flow = np.asarray(state_flow, dtype=float)
    pf = p_forward.probs if isinstance(p_forward, ForwardPolicy) else np.asarray(p_forward, dtype=float)
    pb = p_backward.probs if isinstance(p_backward, BackwardPolicy) else np.asarray(p_backward, dtype=float)
    r = as_reward_vector(dag, reward)
    lhs = state_flow[dag.edge_src] * pf
    rhs = np.where(dag.is_terminating_edge, r[dag.edge_src], state_flow[dag.edge_dst] * pb)
    with np.errstate(invalid="ignore"):
        viol = _rel_violation(lhs, rhs)
    viol = np.where(np.isnan(viol), 0.0, viol)
    worst = int(np.argmax(viol))
    return ConditionCheck(bool(viol[worst] <= tol), dag.edges[worst], float(viol[worst]))
