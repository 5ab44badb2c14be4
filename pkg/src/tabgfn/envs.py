"""Reward-bearing DAG constructions."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np

from .dag import PointedDag, as_reward_vector, build_dag, read_dag_file
from .exceptions import NoAcceptingReachable, TooLarge

MAX_STATES = 2_000_000


@dataclass(eq=False)
class Environment:
    """A pointed DAG with terminal rewards.

    ``reward`` is a vector over all states (zero off the terminating ones).
    ``reward_sampler(state_ids, rng)``, when set, draws noisy rewards whose
    mean is ``reward`` at those states.
    """

    dag: PointedDag
    reward: np.ndarray
    name: str = "explicit"
    labels: Sequence | None = None
    reward_sampler: Callable | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.reward = as_reward_vector(self.dag, self.reward)
        z = self.Z
        if not (z > 0 and math.isfinite(z)):
            raise ValueError("total reward must be finite and positive")

    @property
    def Z(self):
        return float(self.reward.sum())

    @property
    def terminating_states(self):
        return self.dag.terminating_states

    def terminal_rewards(self):
        return self.reward[list(self.dag.terminating_states)]

    def decode(self, state):
        if state == self.dag.sink:
            return "s_f"
        return self.labels[state] if self.labels is not None else state

    def energy(self, state):
        r = self.reward[state]
        return math.inf if r == 0 else -math.log(r)

    def sample_reward(self, states, rng):
        states = np.asarray(states, dtype=np.intp)
        if self.reward_sampler is None:
            return self.reward[states]
        return np.asarray(self.reward_sampler(states, rng), dtype=float)

    def with_reward(self, reward, name=None):
        return Environment(self.dag, reward, name or self.name, self.labels, None, dict(self.meta))


def two_point_noise(reward, spread=0.5):
    """Sampler returning R(1 - spread) or R(1 + spread) with equal odds."""
    reward = np.asarray(reward, dtype=float)

    def sampler(states, rng):
        sign = np.where(rng.random(len(states)) < 0.5, -1.0, 1.0)
        return reward[states] * (1.0 + spread * sign)

    return sampler


# ---------------------------------------------------------------------------
# hypergrid


def hypergrid_reward(coords, side, r0=1e-3, r1=0.5, r2=2.0):
    x = np.abs(np.asarray(coords, dtype=float) / (side - 1) - 0.5)
    ring = np.all((x > 0.25) & (x <= 0.5), axis=-1)
    core = np.all((x > 0.3) & (x < 0.4), axis=-1)
    return r0 + r1 * ring + r2 * core


def make_hypergrid(dims: int, side: int, r0=1e-3, r1=0.5, r2=2.0, max_states=MAX_STATES) -> Environment:
    """Lattice {0..side-1}^dims; each action increments one coordinate and
    every lattice point may exit."""
    if dims < 1 or side < 2:
        raise ValueError("hypergrid needs dims >= 1 and side >= 2")
    n_lattice = side**dims
    if n_lattice + 1 > max_states:
        raise TooLarge(f"hypergrid with {n_lattice} states exceeds {max_states}")
    coords = np.array(list(itertools.product(range(side), repeat=dims)), dtype=np.intp)
    # state index is the mixed-radix code with the first coordinate most significant
    strides = side ** np.arange(dims - 1, -1, -1)
    sink = n_lattice
    edges = []
    for idx, x in enumerate(coords):
        for d in range(dims):
            if x[d] + 1 < side:
                edges.append((idx, idx + int(strides[d])))
        edges.append((idx, sink))
    dag = build_dag(edges, n_lattice + 1)
    reward = np.append(hypergrid_reward(coords, side, r0, r1, r2), 0.0)
    labels = [tuple(int(c) for c in x) for x in coords]
    return Environment(
        dag, reward, "hypergrid", labels, meta={"dims": dims, "side": side, "r0": r0, "r1": r1, "r2": r2}
    )


# ---------------------------------------------------------------------------
# sets and partial assignments


def make_set_env(universe_size: int, reward, max_universe=20) -> Environment:
    """States are subsets (bitmask index) of {0..n-1}; actions add one element.

    ``reward`` maps a frozenset of elements to a non-negative value, either
    as a callable or a mapping.
    """
    n = int(universe_size)
    if n < 0:
        raise ValueError("universe size must be >= 0")
    if n > max_universe:
        raise TooLarge(f"set environment over {n} elements exceeds {max_universe}")
    size = 1 << n
    sink = size
    edges = []
    for mask in range(size):
        for i in range(n):
            if not mask >> i & 1:
                edges.append((mask, mask | 1 << i))
        edges.append((mask, sink))
    dag = build_dag(edges, size + 1)
    labels = [frozenset(i for i in range(n) if m >> i & 1) for m in range(size)]
    fn = _as_callable(reward)
    rvec = np.append([float(fn(s)) for s in labels], 0.0)
    return Environment(dag, rvec, "set", labels, meta={"universe_size": n})


def set_state(elements) -> int:
    """Bitmask state id of a subset."""
    return sum(1 << int(i) for i in set(elements))


def make_assignment_env(domain_sizes: Sequence[int], reward, max_states=MAX_STATES) -> Environment:
    """States are partial assignments of variables; only full assignments exit.

    Each variable's digit is 0 when unassigned and ``v + 1`` when set to ``v``;
    the state index is the mixed-radix code of those digits.
    """
    sizes = [int(d) for d in domain_sizes]
    if not sizes or min(sizes) < 1:
        raise ValueError("need at least one variable, each with a non-empty domain")
    radices = [d + 1 for d in sizes]
    total = math.prod(radices)
    if total + 1 > max_states:
        raise TooLarge(f"{total} partial assignments exceed {max_states}")
    n = len(sizes)
    strides = [math.prod(radices[i + 1 :]) for i in range(n)]
    sink = total
    fn = _as_callable(reward)
    edges, labels = [], []
    rvec = np.zeros(total + 1)
    for code, digits in enumerate(itertools.product(*(range(r) for r in radices))):
        labels.append(tuple(None if d == 0 else d - 1 for d in digits))
        free = [i for i in range(n) if digits[i] == 0]
        if not free:
            edges.append((code, sink))
            rvec[code] = float(fn(labels[-1]))
        for i in free:
            for v in range(sizes[i]):
                edges.append((code, code + (v + 1) * strides[i]))
    dag = build_dag(edges, total + 1)
    return Environment(dag, rvec, "assignment", labels, meta={"domain_sizes": sizes})


def assignment_state(env: Environment, partial: Mapping[int, int]) -> int:
    """State id of the partial assignment ``{variable: value}``."""
    sizes = env.meta["domain_sizes"]
    radices = [d + 1 for d in sizes]
    code = 0
    for i, r in enumerate(radices):
        digit = partial[i] + 1 if i in partial else 0
        code = code * r + digit
    return code


def _as_callable(reward):
    if callable(reward):
        return reward
    if isinstance(reward, Mapping):
        return lambda key: reward.get(key, 0.0)
    raise TypeError("reward must be a callable or a mapping")


# ---------------------------------------------------------------------------
# time-stamped unrolling of arbitrary transition graphs


def timestamp_wrap(
    transitions: Mapping[Hashable, Sequence[Hashable]] | Sequence[tuple],
    source: Hashable,
    horizon: int,
    accepting,
    reward,
) -> Environment:
    """Unroll a possibly cyclic transition graph into states ``(node, t)``.

    Edges go from ``(u, t)`` to ``(v, t + 1)`` for ``t < horizon``; accepting
    nodes at any time may exit.  Layered states that cannot reach an
    accepting one are dropped.  ``meta["project"]`` maps state ids back to
    original nodes.
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    if isinstance(transitions, Mapping):
        succ = {u: list(vs) for u, vs in transitions.items()}
    else:
        succ = {}
        for u, v in transitions:
            succ.setdefault(u, []).append(v)
    accepting = set(accepting)
    fn = _as_callable(reward)

    # forward layers from (source, 0)
    layers = [[source]]
    for t in range(horizon):
        nxt = []
        seen = set()
        for u in layers[-1]:
            for v in succ.get(u, ()):
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        layers.append(nxt)

    # backward pruning: keep (u, t) that can reach an accepting node
    alive = [set() for _ in layers]
    for t in range(len(layers) - 1, -1, -1):
        for u in layers[t]:
            if u in accepting or (t + 1 < len(layers) and any(v in alive[t + 1] for v in succ.get(u, ()))):
                alive[t].add(u)
    if source not in alive[0]:
        raise NoAcceptingReachable(f"no accepting node reachable from {source!r} within {horizon} steps")

    nodes = [(u, t) for t, layer in enumerate(layers) for u in layer if u in alive[t]]
    index = {node: i for i, node in enumerate(nodes)}
    sink = len(nodes)
    edges = []
    rvec = np.zeros(sink + 1)
    for (u, t), i in index.items():
        if t < horizon:
            for v in dict.fromkeys(succ.get(u, ())):
                j = index.get((v, t + 1))
                if j is not None:
                    edges.append((i, j))
        if u in accepting:
            edges.append((i, sink))
            rvec[i] = float(fn(u))
    dag = build_dag(edges, sink + 1)
    return Environment(
        dag, rvec, "timestamp", nodes, meta={"horizon": horizon, "project": [u for u, _ in nodes]}
    )


# ---------------------------------------------------------------------------
# explicit graphs


def load_env_file(path) -> Environment:
    """Environment from the ``states`` / ``E`` / ``R`` text format."""
    parsed = read_dag_file(path)
    return Environment(parsed.dag, parsed.rewards, "file", meta={"path": str(path), "flows": parsed.flows})


# small two-terminal example with four trajectories; keys are complete
# trajectories, values trajectory flows
TOY_EDGES = [(0, 1), (0, 2), (1, 2), (2, 3), (2, 4), (3, 4)]
TOY_REWARD = {2: 2.0, 3: 3.0}
TOY_FLOWS = {
    "nonmarkov_a": {(0, 2, 4): 1.0, (0, 1, 2, 4): 1.0, (0, 2, 3, 4): 1.0, (0, 1, 2, 3, 4): 2.0},
    "markov_a": {(0, 2, 4): 4 / 5, (0, 1, 2, 4): 6 / 5, (0, 2, 3, 4): 6 / 5, (0, 1, 2, 3, 4): 9 / 5},
    "nonmarkov_b": {(0, 2, 4): 1.0, (0, 1, 2, 4): 1.0, (0, 2, 3, 4): 2.0, (0, 1, 2, 3, 4): 1.0},
    "markov_b": {(0, 2, 4): 6 / 5, (0, 1, 2, 4): 4 / 5, (0, 2, 3, 4): 9 / 5, (0, 1, 2, 3, 4): 6 / 5},
}


def make_toy_env(reward=None) -> Environment:
    dag = build_dag(TOY_EDGES, 5)
    return Environment(dag, TOY_REWARD if reward is None else reward, "toy", ["s0", "s1", "s2", "s3"])


def make_chain_env(length: int, reward=1.0) -> Environment:
    """s0 -> s1 -> ... -> s_{length-1}, only the last state exits."""
    n = int(length)
    edges = [(i, i + 1) for i in range(n - 1)] + [(n - 1, n)]
    return Environment(build_dag(edges, n + 1), {n - 1: reward}, "chain")


def random_env(rng, max_states=12, reward_low=0.1, reward_high=10.0, extra_edge_rate=0.5) -> Environment:
    """Random pointed DAG on at most ``max_states`` states with random rewards."""
    n = int(rng.integers(2, max_states + 1))
    sink = n - 1
    edges = set()
    for v in range(1, sink):
        edges.add((int(rng.integers(0, v)), v))
    inner = sink
    if inner >= 2:
        for _ in range(int(rng.poisson(extra_edge_rate * inner))):
            a, b = sorted(int(x) for x in rng.choice(inner, 2, replace=False))
            edges.add((a, b))
    has_child = {a for a, _ in edges}
    for s in range(sink):
        if s not in has_child or rng.random() < 0.4:
            edges.add((s, sink))
    dag = build_dag(sorted(edges), n)
    reward = {s: float(rng.uniform(reward_low, reward_high)) for s in dag.terminating_states}
    return Environment(dag, reward, "random")


ENV_BUILDERS = {
    "toy": lambda **kw: make_toy_env(**kw),
    "hypergrid": lambda **kw: make_hypergrid(**kw),
    "chain": lambda **kw: make_chain_env(**kw),
    # R(s) = base + per_element * |s|
    "set": lambda universe_size, base=1.0, per_element=1.0: make_set_env(
        universe_size, lambda s: base + per_element * len(s)
    ),
    "random": lambda seed=0, **kw: random_env(np.random.default_rng(seed), **kw),
    "file": lambda path, **kw: load_env_file(path),
}


def make_env(kind: str, **kwargs) -> Environment:
    try:
        builder = ENV_BUILDERS[kind]
    except KeyError:
        raise ValueError(f"unknown environment {kind!r}; choose from {sorted(ENV_BUILDERS)}") from None
    return builder(**kwargs)
