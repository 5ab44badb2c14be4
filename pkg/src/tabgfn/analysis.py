"""Exact downstream quantities computed from rewards on enumerable DAGs.

Marginals over terminating descendants are set sums, not flow recursions:
children share descendants, so summing the children's marginals would
double count.  They are computed from a boolean descendant matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dag import PointedDag
from .envs import Environment
from .exceptions import RewardOutOfRange, TabGFNError
from .sampling import terminating_distribution


def descendant_matrix(dag: PointedDag) -> np.ndarray:
    """``D[s, k]`` is True when terminating state ``k`` (by position) is >= s.

    The sink row is all False.
    """
    n_term = len(dag.terminating_states)
    desc = np.zeros((dag.num_states, n_term), dtype=bool)
    for s in reversed(dag.topo_order):
        if s == dag.sink:
            continue
        k = dag.terminal_position.get(s)
        if k is not None:
            desc[s, k] = True
        for c in dag.children[s]:
            if c != dag.sink:
                desc[s] |= desc[c]
    return desc


def _descendants(env):
    cached = getattr(env.dag, "_descendants", None)
    if cached is None:
        cached = env.dag._descendants = descendant_matrix(env.dag)
    return cached


@dataclass(frozen=True)
class FreeEnergyTable:
    """Per-state marginal M(s) = sum of R over terminating s' >= s and
    free energy -log M(s).  Both are NaN at the sink."""

    marginal: np.ndarray
    free_energy: np.ndarray

    def to_json(self):
        return {
            "marginal": [None if np.isnan(m) else float(m) for m in self.marginal],
            "free_energy": [None if not np.isfinite(f) else float(f) for f in self.free_energy],
        }


def _marginals(env, terminal_values):
    m = _descendants(env).astype(float) @ terminal_values
    m[env.dag.sink] = np.nan
    return m


def brute_force_target(env: Environment) -> np.ndarray:
    """R(s) / Z over ``dag.terminating_states``."""
    r = env.terminal_rewards()
    return r / r.sum()


def free_energy_table(env: Environment, reward=None) -> FreeEnergyTable:
    r = env.terminal_rewards() if reward is None else np.asarray(reward, dtype=float)
    m = _marginals(env, r)
    with np.errstate(divide="ignore"):
        fe = -np.log(m)
    return FreeEnergyTable(m, fe)


def conditional_terminating_distribution(env: Environment, anchor: int) -> np.ndarray:
    """P_T(s' | s' >= anchor) over ``dag.terminating_states``: R(s') / M(anchor)
    on descendants and zero elsewhere."""
    if anchor == env.dag.sink:
        raise ValueError("the sink has no terminating descendants")
    r = env.terminal_rewards()
    mask = _descendants(env)[anchor]
    m = float(r[mask].sum())
    if m <= 0:
        raise TabGFNError(f"state {anchor} has zero reward mass below it")
    return np.where(mask, r, 0.0) / m


def superset_marginal(env: Environment, state: int) -> float:
    """Mass of all terminating supersets (or completions) of ``state``."""
    if env.name not in ("set", "assignment"):
        raise ValueError("superset marginals are defined for set and assignment environments")
    r = env.terminal_rewards()
    return float(r[_descendants(env)[state]].sum() / r.sum())


# ---------------------------------------------------------------------------
# entropies


def _entropic(r):
    if np.any(r <= 0) or np.any(r >= 1):
        raise RewardOutOfRange("entropy estimates need 0 < R(s) < 1 at every terminating state; rescale first")
    return -r * np.log(r)


def _entropy_at(env, anchor, r):
    mask = _descendants(env)[anchor]
    f = float(r[mask].sum())
    f_ent = float(_entropic(r[mask]).sum())
    return f_ent / f + np.log(f)


def entropy_estimate(env: Environment) -> float:
    """H[S] of P_T from the initial flows of the R and -R log R networks."""
    return _entropy_at(env, env.dag.source, env.terminal_rewards())


def conditional_entropy(env: Environment, anchor: int) -> float:
    """H[S | S >= anchor] from the state-conditional initial flows."""
    return _entropy_at(env, anchor, env.terminal_rewards())


def mutual_information(env: Environment, conditions, weights=None) -> float:
    """H[S] - E_X H[S | X] over a finite set of conditions.

    Each condition restricts the reward to a subset of terminating states,
    given as a boolean mask over ``dag.terminating_states`` or a collection of
    state ids.  ``weights`` is P(X), uniform by default.  The result is the
    mutual information of the joint only when the weighted mixture of the
    conditional targets equals R / Z.
    """
    dag = env.dag
    r = env.terminal_rewards()
    masks = [_condition_mask(dag, c) for c in conditions]
    if not masks:
        raise ValueError("need at least one condition")
    w = np.full(len(masks), 1.0 / len(masks)) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (len(masks),) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
        raise ValueError("weights must be a probability vector over the conditions")
    h = entropy_estimate(env)
    cond = []
    for mask in masks:
        rx = r[mask]
        if not rx.sum() > 0:
            raise ValueError("a condition keeps no reward mass")
        cond.append(float(_entropic(rx).sum() / rx.sum() + np.log(rx.sum())))
    return h - float(np.dot(w, cond))


def _condition_mask(dag, cond):
    arr = np.asarray(cond)
    if arr.dtype == bool and arr.shape == (len(dag.terminating_states),):
        return arr
    mask = np.zeros(len(dag.terminating_states), dtype=bool)
    for s in cond:
        mask[dag.terminal_position[int(s)]] = True
    return mask


# ---------------------------------------------------------------------------
# expected reward and greedy policy


def expected_reward_table(env: Environment) -> np.ndarray:
    """sum R^2 / sum R over terminating descendants, per state (NaN at the sink)."""
    r = env.terminal_rewards()
    return _marginals(env, r * r) / _marginals(env, r)


def expected_reward(env: Environment, anchor: int) -> float:
    if anchor == env.dag.sink:
        raise ValueError("anchor must not be the sink")
    return float(expected_reward_table(env)[anchor])


def greedy_policy(env: Environment) -> np.ndarray:
    """Chosen next state per non-sink state (the sink means exit).

    Exiting is worth R(s); moving to a child is worth that child's expected
    reward.  Ties go to the lowest child index, so exit loses ties.
    """
    dag = env.dag
    v = expected_reward_table(env)
    choice = np.full(dag.num_states, -1, dtype=np.intp)
    for s in range(dag.num_states - 1):
        best, best_val = -1, -np.inf
        for c in dag.children[s]:
            val = env.reward[s] if c == dag.sink else v[c]
            if val > best_val:
                best, best_val = c, val
        choice[s] = best
    return choice


def greedy_rollout(env: Environment, start: int | None = None):
    """Follow the greedy policy from ``start`` (default the source).

    Returns the visited trajectory and the terminal reward collected.
    """
    policy = greedy_policy(env)
    s = env.dag.source if start is None else start
    traj = [s]
    while s != env.dag.sink:
        nxt = int(policy[s])
        if nxt == env.dag.sink:
            traj.append(nxt)
            return tuple(traj), float(env.reward[s])
        s = nxt
        traj.append(s)
    raise ValueError("start must not be the sink")


def policy_expected_reward(env: Environment, forward_probs) -> float:
    """E[R(S)] when S is drawn from the terminating law of ``forward_probs``."""
    p = terminating_distribution(env.dag, forward_probs)
    return float(np.dot(p, env.terminal_rewards()))


def analysis_report(env: Environment, entropy=True, expected=True):
    """JSON-ready summary of the exact analyses."""
    fe = free_energy_table(env)
    out = {
        "Z": env.Z,
        "target": {str(s): float(p) for s, p in zip(env.dag.terminating_states, brute_force_target(env))},
        "free_energy": fe.to_json(),
    }
    if entropy:
        # the estimator is invariant to scaling R, so normalize into (0, 1) here
        r = env.terminal_rewards()
        if np.all(r > 0):
            out["entropy"] = float(entropy_estimate(env.with_reward(r / (2 * r.sum()))))
        else:
            out["entropy"] = None
    if expected:
        vt = expected_reward_table(env)
        out["expected_reward"] = [None if np.isnan(x) else float(x) for x in vt]
        out["greedy_policy"] = greedy_policy(env)[:-1].tolist()
    return out
