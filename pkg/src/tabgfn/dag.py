"""Pointed DAGs, complete trajectories and transition-probability tables.

States are dense integers: ``0`` is the source and ``num_states - 1`` the
sink.  Trajectories are plain tuples of state ids.
"""
from __future__ import annotations

import hashlib
import heapq
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import (
    CycleDetected,
    DagError,
    DuplicateEdge,
    ExplosionGuard,
    InconsistentPolicy,
    NotPointed,
    SelfEdge,
)

DEFAULT_TRAJECTORY_CAP = 10**7
POLICY_ATOL = 1e-12

Trajectory = tuple


class PointedDag:
    """Validated graph with one source (state 0) and one sink (last state).

    Build instances with :func:`build_dag`; the constructor trusts its inputs.
    """

    def __init__(self, num_states, edges, topo_order):
        self.num_states = int(num_states)
        self.edges = tuple((int(u), int(v)) for u, v in edges)
        self.topo_order = tuple(topo_order)
        self.source = 0
        self.sink = self.num_states - 1

        n, m = self.num_states, len(self.edges)
        self.edge_src = np.fromiter((u for u, _ in self.edges), dtype=np.intp, count=m)
        self.edge_dst = np.fromiter((v for _, v in self.edges), dtype=np.intp, count=m)
        self.edge_index = {e: i for i, e in enumerate(self.edges)}

        children = [[] for _ in range(n)]
        parents = [[] for _ in range(n)]
        for i, (u, v) in enumerate(self.edges):
            children[u].append(i)
            parents[v].append(i)
        # adjacency lists hold edge ids sorted by the neighbouring state
        self.child_edges = tuple(tuple(sorted(c, key=lambda i: self.edges[i][1])) for c in children)
        self.parent_edges = tuple(tuple(sorted(p, key=lambda i: self.edges[i][0])) for p in parents)
        self.children = tuple(tuple(self.edges[i][1] for i in c) for c in self.child_edges)
        self.parents = tuple(tuple(self.edges[i][0] for i in p) for p in self.parent_edges)

        self.terminating_states = self.parents[self.sink]
        self.is_terminating_edge = self.edge_dst == self.sink
        self.terminating_edges = tuple(int(i) for i in self.parent_edges[self.sink])
        self.nonterminating_edges = np.flatnonzero(~self.is_terminating_edge)
        self.terminal_position = {s: k for k, s in enumerate(self.terminating_states)}
        self._longest = None

    def __repr__(self):
        return f"PointedDag(num_states={self.num_states}, num_edges={len(self.edges)})"

    def __eq__(self, other):
        return (
            isinstance(other, PointedDag)
            and self.num_states == other.num_states
            and self.edges == other.edges
        )

    def __hash__(self):
        return hash((self.num_states, self.edges))

    @property
    def num_edges(self):
        return len(self.edges)

    def is_terminating(self, state):
        return state in self.terminal_position

    def fingerprint(self):
        """Short content hash of the graph, used to tag checkpoints."""
        text = dump_dag_text(self)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def path_counts(self):
        """Number of source-to-state paths, by dynamic programming over parents."""
        counts = [0] * self.num_states
        counts[self.source] = 1
        for s in self.topo_order:
            for p in self.parents[s]:
                counts[s] += counts[p]
        return counts

    def longest_path_length(self):
        if self._longest is None:
            self._longest = self._longest_path()
        return self._longest

    def _longest_path(self):
        depth = [0] * self.num_states
        for s in self.topo_order:
            for c in self.children[s]:
                depth[c] = max(depth[c], depth[s] + 1)
        return depth[self.sink]


def build_dag(edges: Iterable[Sequence[int]], num_states: int) -> PointedDag:
    """Validate an edge list and return a :class:`PointedDag`.

    Raises
    ------
    SelfEdge, DuplicateEdge, CycleDetected, NotPointed, DagError
    """
    num_states = int(num_states)
    if num_states < 2:
        raise DagError("a pointed DAG needs at least a source and a distinct sink")
    edge_list = []
    seen = set()
    for e in edges:
        u, v = (int(x) for x in e)
        if not (0 <= u < num_states and 0 <= v < num_states):
            raise DagError(f"edge {(u, v)} has an endpoint outside 0..{num_states - 1}")
        if u == v:
            raise SelfEdge(u)
        if (u, v) in seen:
            raise DuplicateEdge((u, v))
        seen.add((u, v))
        edge_list.append((u, v))

    succ = [[] for _ in range(num_states)]
    pred = [[] for _ in range(num_states)]
    indeg = [0] * num_states
    for u, v in edge_list:
        succ[u].append(v)
        pred[v].append(u)
        indeg[v] += 1

    # Kahn's algorithm, smallest ready state first for a deterministic order
    heap = [s for s in range(num_states) if indeg[s] == 0]
    heapq.heapify(heap)
    order = []
    remaining = indeg[:]
    while heap:
        s = heapq.heappop(heap)
        order.append(s)
        for c in succ[s]:
            remaining[c] -= 1
            if remaining[c] == 0:
                heapq.heappush(heap, c)
    if len(order) < num_states:
        raise CycleDetected(sorted(s for s in range(num_states) if remaining[s] > 0))

    source, sink = 0, num_states - 1
    forward = _reach(source, succ, num_states)
    for s in range(num_states):
        if not forward[s]:
            raise NotPointed(s, NotPointed.UNREACHABLE)
    backward = _reach(sink, pred, num_states)
    for s in range(num_states):
        if not backward[s]:
            raise NotPointed(s, NotPointed.DEAD_END)
    return PointedDag(num_states, edge_list, order)


def _reach(start, adjacency, n):
    mark = [False] * n
    mark[start] = True
    stack = [start]
    while stack:
        s = stack.pop()
        for t in adjacency[s]:
            if not mark[t]:
                mark[t] = True
                stack.append(t)
    return mark


def enumerate_paths(dag: PointedDag, start: int, end: int, cap: int = DEFAULT_TRAJECTORY_CAP):
    """All paths from ``start`` to ``end`` in lexicographic order of states."""
    counts = [0] * dag.num_states
    counts[start] = 1
    for s in dag.topo_order:
        if counts[s]:
            for c in dag.children[s]:
                counts[c] += counts[s]
    if counts[end] > cap:
        raise ExplosionGuard(counts[end], cap)

    # prune to states that can still reach ``end``
    alive = [False] * dag.num_states
    alive[end] = True
    for s in reversed(dag.topo_order):
        if any(alive[c] for c in dag.children[s]):
            alive[s] = True

    paths = []
    prefix = [start]

    def walk(s):
        if s == end:
            paths.append(tuple(prefix))
            return
        for c in dag.children[s]:
            if alive[c]:
                prefix.append(c)
                walk(c)
                prefix.pop()

    if alive[start]:
        walk(start)
    return paths


def enumerate_complete_trajectories(dag: PointedDag, cap: int = DEFAULT_TRAJECTORY_CAP):
    """Every source-to-sink path, lexicographically ordered.

    >>> dag = build_dag([(0, 1)], 2)
    >>> enumerate_complete_trajectories(dag)
    [(0, 1)]
    """
    return enumerate_paths(dag, dag.source, dag.sink, cap=cap)


def trajectory_edge_ids(dag: PointedDag, traj: Sequence[int]) -> np.ndarray:
    try:
        return np.array([dag.edge_index[(a, b)] for a, b in zip(traj[:-1], traj[1:])], dtype=np.intp)
    except KeyError as exc:
        raise DagError(f"trajectory {tuple(traj)} uses non-edge {exc.args[0]}") from None


def validate_trajectory(dag: PointedDag, traj: Sequence[int], complete: bool = True) -> Trajectory:
    traj = tuple(int(s) for s in traj)
    if len(traj) < 2:
        raise DagError("a trajectory has at least one edge")
    trajectory_edge_ids(dag, traj)
    if complete and (traj[0] != dag.source or traj[-1] != dag.sink):
        raise DagError(f"trajectory {traj} is not complete")
    return traj


# ---------------------------------------------------------------------------
# transition tables


def _group_sums(values, groups, num_groups):
    out = np.zeros(num_groups)
    np.add.at(out, groups, values)
    return out


@dataclass(frozen=True, eq=False)
class ForwardPolicy:
    """P_F(s'|s) stored per edge.  Rows that are entirely NaN are undefined
    (zero-flow states) and skipped by validation."""

    dag: PointedDag
    probs: np.ndarray
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float).copy()
        if probs.shape != (self.dag.num_edges,):
            raise InconsistentPolicy(f"expected {self.dag.num_edges} edge probabilities, got {probs.shape}")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        if self.validate:
            _check_rows(self.dag, probs, self.dag.edge_src, range(self.dag.num_states - 1), "children")

    def prob(self, s, s_next):
        return float(self.probs[self.dag.edge_index[(s, s_next)]])

    @property
    def undefined_states(self):
        return _undefined_rows(self.dag, self.probs, self.dag.edge_src, range(self.dag.num_states - 1))


@dataclass(frozen=True, eq=False)
class BackwardPolicy:
    """P_B(s|s') stored per edge ``s -> s'``; normalized over parents of s'."""

    dag: PointedDag
    probs: np.ndarray
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float).copy()
        if probs.shape != (self.dag.num_edges,):
            raise InconsistentPolicy(f"expected {self.dag.num_edges} edge probabilities, got {probs.shape}")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        if self.validate:
            _check_rows(self.dag, probs, self.dag.edge_dst, range(1, self.dag.num_states), "parents")

    def prob(self, s, s_next):
        return float(self.probs[self.dag.edge_index[(s, s_next)]])

    @property
    def undefined_states(self):
        return _undefined_rows(self.dag, self.probs, self.dag.edge_dst, range(1, self.dag.num_states))


def _undefined_rows(dag, probs, key, states):
    nan = np.isnan(probs)
    bad = _group_sums(nan.astype(float), key, dag.num_states)
    size = np.bincount(key, minlength=dag.num_states)
    return tuple(s for s in states if size[s] and bad[s] == size[s])


def _check_rows(dag, probs, key, states, what):
    nan = np.isnan(probs)
    if np.any(probs[~nan] < -POLICY_ATOL) or np.any(probs[~nan] > 1 + POLICY_ATOL):
        raise InconsistentPolicy("probabilities must lie in [0, 1]")
    sums = _group_sums(np.where(nan, 0.0, probs), key, dag.num_states)
    nan_count = _group_sums(nan.astype(float), key, dag.num_states)
    size = np.bincount(key, minlength=dag.num_states)
    for s in states:
        if nan_count[s] == size[s]:
            continue
        if nan_count[s]:
            raise InconsistentPolicy(f"state {s}: partially undefined row over {what}")
        if abs(sums[s] - 1.0) > POLICY_ATOL:
            raise InconsistentPolicy(f"state {s}: probabilities over {what} sum to {sums[s]!r}")


def uniform_forward_policy(dag: PointedDag) -> ForwardPolicy:
    deg = np.array([len(c) for c in dag.child_edges], dtype=float)
    return ForwardPolicy(dag, 1.0 / deg[dag.edge_src])


def uniform_backward_policy(dag: PointedDag) -> BackwardPolicy:
    deg = np.array([len(p) for p in dag.parent_edges], dtype=float)
    return BackwardPolicy(dag, 1.0 / deg[dag.edge_dst])


def as_forward_policy(dag, policy) -> ForwardPolicy:
    if isinstance(policy, ForwardPolicy):
        if policy.dag != dag:
            raise InconsistentPolicy("policy belongs to a different DAG")
        return policy
    if isinstance(policy, Mapping):
        probs = np.zeros(dag.num_edges)
        for (s, t), p in policy.items():
            probs[dag.edge_index[(s, t)]] = p
        return ForwardPolicy(dag, probs)
    return ForwardPolicy(dag, policy)


def as_backward_policy(dag, policy) -> BackwardPolicy:
    if isinstance(policy, BackwardPolicy):
        if policy.dag != dag:
            raise InconsistentPolicy("policy belongs to a different DAG")
        return policy
    if isinstance(policy, Mapping):
        probs = np.zeros(dag.num_edges)
        for (s, t), p in policy.items():
            probs[dag.edge_index[(s, t)]] = p
        return BackwardPolicy(dag, probs)
    return BackwardPolicy(dag, policy)


def trajectory_probability(policy: ForwardPolicy | BackwardPolicy, traj: Sequence[int]) -> float:
    """Product of the per-step conditionals of ``policy`` along ``traj``."""
    ids = trajectory_edge_ids(policy.dag, tuple(traj))
    return float(np.prod(policy.probs[ids]))


# ---------------------------------------------------------------------------
# rewards


def as_reward_vector(dag: PointedDag, reward) -> np.ndarray:
    """Normalize a reward given as mapping, callable or array.

    Returns an array of length ``num_states`` that is zero off the terminating
    states.  Arrays may also be indexed by terminating-state position.
    """
    out = np.zeros(dag.num_states)
    term = list(dag.terminating_states)
    if reward is None:
        raise ValueError("reward is required")
    if isinstance(reward, Mapping):
        extra = set(reward) - set(term)
        if extra:
            raise ValueError(f"rewards given for non-terminating states {sorted(extra)}")
        for s in term:
            out[s] = float(reward.get(s, 0.0))
    elif callable(reward):
        for s in term:
            out[s] = float(reward(s))
    else:
        arr = np.asarray(reward, dtype=float)
        if arr.shape == (dag.num_states,):
            out[term] = arr[term]
        elif arr.shape == (len(term),):
            out[term] = arr
        else:
            raise ValueError(f"reward array of shape {arr.shape} matches neither states nor terminals")
    if not np.all(np.isfinite(out)) or np.any(out < 0):
        raise ValueError("rewards must be finite and non-negative")
    return out


# ---------------------------------------------------------------------------
# text format


def dump_dag_text(dag: PointedDag, rewards=None, flows: Mapping | None = None) -> str:
    """Serialize to the line format read by :func:`parse_dag_text`.

    ``flows`` optionally maps complete trajectories to their flow value and
    is written as ``T value s0 s1 ... sf`` lines.
    """
    lines = [f"states {dag.num_states}"]
    lines += [f"E {u} {v}" for u, v in dag.edges]
    if rewards is not None:
        vec = as_reward_vector(dag, rewards)
        lines += [f"R {s} {float(vec[s])!r}" for s in dag.terminating_states]
    if flows:
        for traj, value in flows.items():
            lines.append("T " + repr(float(value)) + " " + " ".join(str(s) for s in traj))
    return "\n".join(lines) + "\n"


@dataclass
class DagFile:
    dag: PointedDag
    rewards: dict = field(default_factory=dict)
    flows: dict = field(default_factory=dict)


def parse_dag_text(text: str) -> DagFile:
    num_states = None
    edges, rewards, flows = [], {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "states" and len(tok) == 2:
                if num_states is not None:
                    raise ValueError("repeated header")
                num_states = int(tok[1])
            elif tok[0] == "E" and len(tok) == 3:
                edges.append((int(tok[1]), int(tok[2])))
            elif tok[0] == "R" and len(tok) == 3:
                rewards[int(tok[1])] = float(tok[2])
            elif tok[0] == "T" and len(tok) >= 4:
                flows[tuple(int(t) for t in tok[2:])] = float(tok[1])
            else:
                raise ValueError(f"unrecognized record {tok[0]!r}")
        except ValueError as exc:
            raise DagError(f"line {lineno}: {exc}") from None
    if num_states is None:
        raise DagError("missing 'states N' header")
    dag = build_dag(edges, num_states)
    for s, r in rewards.items():
        if not dag.is_terminating(s):
            raise DagError(f"reward given for non-terminating state {s}")
        if not (math.isfinite(r) and r >= 0):
            raise DagError(f"reward at state {s} must be finite and non-negative")
    for traj in flows:
        validate_trajectory(dag, traj)
    return DagFile(dag, rewards, flows)


def read_dag_file(path) -> DagFile:
    with open(path, encoding="utf-8") as fh:
        return parse_dag_text(fh.read())


def write_dag_file(path, dag, rewards=None, flows=None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_dag_text(dag, rewards, flows))
