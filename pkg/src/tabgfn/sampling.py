"""Vectorized rollouts of forward and backward policies over a batch."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dag import PointedDag


def _pad(groups, n_rows):
    width = max((len(g) for g in groups), default=0)
    table = np.full((n_rows, max(width, 1)), -1, dtype=np.intp)
    for s, g in enumerate(groups):
        table[s, : len(g)] = g
    return table


class Adjacency:
    """Padded edge-id tables: row ``s`` lists the out- (or in-) edges of ``s``."""

    def __init__(self, dag: PointedDag):
        self.dag = dag
        self.out_edges = _pad(dag.child_edges, dag.num_states)
        self.in_edges = _pad(dag.parent_edges, dag.num_states)
        self.out_degree = np.array([len(c) for c in dag.child_edges], dtype=np.intp)
        self.in_degree = np.array([len(p) for p in dag.parent_edges], dtype=np.intp)

    @classmethod
    def of(cls, dag):
        hit = getattr(dag, "_adjacency", None)
        if hit is None:
            hit = dag._adjacency = cls(dag)
        return hit


@dataclass
class TrajectoryBatch:
    """Edge-id sequences padded with -1, one row per trajectory."""

    dag: PointedDag
    edges: np.ndarray

    @property
    def lengths(self):
        return (self.edges >= 0).sum(axis=1)

    def __len__(self):
        return self.edges.shape[0]

    def terminal_states(self):
        last = self.edges[np.arange(len(self)), self.lengths - 1]
        return self.dag.edge_src[last]

    def to_tuples(self):
        out = []
        for row in self.edges:
            ids = row[row >= 0]
            out.append((self.dag.source,) + tuple(int(s) for s in self.dag.edge_dst[ids]))
        return out

    @classmethod
    def from_tuples(cls, dag, trajectories):
        rows = [[dag.edge_index[(a, b)] for a, b in zip(t[:-1], t[1:])] for t in trajectories]
        width = max((len(r) for r in rows), default=1)
        edges = np.full((len(rows), width), -1, dtype=np.intp)
        for i, r in enumerate(rows):
            edges[i, : len(r)] = r
        return cls(dag, edges)

    @classmethod
    def concatenate(cls, dag, batches):
        batches = [b for b in batches if len(b)]
        if not batches:
            return cls(dag, np.full((0, 1), -1, dtype=np.intp))
        width = max(b.edges.shape[1] for b in batches)
        rows = []
        for b in batches:
            pad = np.full((len(b), width - b.edges.shape[1]), -1, dtype=np.intp)
            rows.append(np.hstack([b.edges, pad]))
        return cls(dag, np.vstack(rows))


def _cumulative(table, probs_per_edge):
    p = np.where(table >= 0, probs_per_edge[np.maximum(table, 0)], 0.0)
    return np.cumsum(p, axis=1)


def _choose(table, cum_table, degree, states, rng):
    cum = cum_table[states]
    u = rng.random(len(states)) * cum[:, -1]
    k = (cum <= u[:, None]).sum(axis=1)
    # guard against u landing on the total due to rounding
    k = np.minimum(k, degree[states] - 1)
    return table[states, k]


def sample_forward(dag: PointedDag, forward_probs, rng, n: int, epsilon: float = 0.0) -> TrajectoryBatch:
    """Roll out ``n`` trajectories from the source.

    With ``epsilon > 0`` each step follows the uniform-over-children policy
    with that probability.
    """
    adj = Adjacency.of(dag)
    probs = np.asarray(forward_probs, dtype=float)
    if epsilon > 0:
        uniform = 1.0 / adj.out_degree[dag.edge_src]
        probs = (1.0 - epsilon) * probs + epsilon * uniform
    width = dag.longest_path_length()
    cum = _cumulative(adj.out_edges, probs)
    edges = np.full((n, width), -1, dtype=np.intp)
    state = np.zeros(n, dtype=np.intp)
    active = np.arange(n)
    t = 0
    while active.size:
        e = _choose(adj.out_edges, cum, adj.out_degree, state[active], rng)
        edges[active, t] = e
        state[active] = dag.edge_dst[e]
        active = active[state[active] != dag.sink]
        t += 1
    return TrajectoryBatch(dag, edges)


def sample_backward(dag: PointedDag, backward_probs, starts, rng) -> TrajectoryBatch:
    """Walk from each terminating state in ``starts`` back to the source with
    P_B, then return the reversed (forward-ordered) trajectories including the
    final exit edge."""
    adj = Adjacency.of(dag)
    probs = np.asarray(backward_probs, dtype=float)
    starts = np.asarray(starts, dtype=np.intp)
    n = len(starts)
    width = dag.longest_path_length()
    rev = np.full((n, width), -1, dtype=np.intp)
    exit_edges = np.array([dag.edge_index[(int(s), dag.sink)] for s in starts], dtype=np.intp)
    rev[:, 0] = exit_edges
    cum = _cumulative(adj.in_edges, probs)
    state = starts.copy()
    active = np.flatnonzero(state != dag.source)
    t = 1
    while active.size:
        e = _choose(adj.in_edges, cum, adj.in_degree, state[active], rng)
        rev[active, t] = e
        state[active] = dag.edge_src[e]
        active = active[state[active] != dag.source]
        t += 1
    lengths = (rev >= 0).sum(axis=1)
    edges = np.full_like(rev, -1)
    for i in range(n):
        edges[i, : lengths[i]] = rev[i, : lengths[i]][::-1]
    return TrajectoryBatch(dag, edges)


def reach_probabilities(dag: PointedDag, forward_probs) -> np.ndarray:
    """Probability that a forward rollout visits each state."""
    probs = np.asarray(forward_probs, dtype=float)
    reach = np.zeros(dag.num_states)
    reach[dag.source] = 1.0
    for s in dag.topo_order:
        if reach[s] == 0.0:
            continue
        ids = list(dag.child_edges[s])
        np.add.at(reach, dag.edge_dst[ids], reach[s] * probs[ids])
    return reach


def terminating_distribution(dag: PointedDag, forward_probs) -> np.ndarray:
    """P_T over ``dag.terminating_states`` by the forward reach DP."""
    reach = reach_probabilities(dag, forward_probs)
    ids = list(dag.terminating_edges)
    return reach[dag.edge_src[ids]] * np.asarray(forward_probs, dtype=float)[ids]
