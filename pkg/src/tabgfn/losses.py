"""Flow-matching, detailed-balance and trajectory-balance losses.

All three are squared log-ratios.  Gradients are closed-form derivatives
with respect to the flat log-parameter vector ``params.theta``; the batched
functions return per-unit losses and the gradient summed over units.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dag import DEFAULT_TRAJECTORY_CAP, as_reward_vector, enumerate_complete_trajectories
from .exceptions import IncompatibleParamsLoss, ZeroRewardOnTrajectory
from .params import (
    EdgeFlowParams,
    ForwardBackwardParams,
    TabularParams,
    TrajectoryBalanceParams,
)
from .sampling import TrajectoryBatch

GRANULARITY = {"fm": "state", "db": "edge", "tb": "trajectory"}
REQUIRED_PARAMS = {"fm": EdgeFlowParams, "db": ForwardBackwardParams, "tb": TrajectoryBalanceParams}


@dataclass(frozen=True)
class LossSpec:
    """Which loss to use.

    ``delta`` softens the FM and DB log-ratios and is ignored by TB.
    ``include_source`` adds the FM term at the source state, which has no
    incoming flow and is finite only for ``delta > 0``.
    """

    kind: str = "tb"
    delta: float = 0.0
    include_source: bool = False

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in GRANULARITY:
            raise ValueError(f"unknown loss {self.kind!r}; choose fm, db or tb")
        object.__setattr__(self, "kind", kind)
        if not self.delta >= 0:
            raise ValueError("delta must be >= 0")

    @property
    def granularity(self):
        return GRANULARITY[self.kind]


def check_compatible(params: TabularParams, spec: LossSpec):
    need = REQUIRED_PARAMS[spec.kind]
    if not isinstance(params, need):
        raise IncompatibleParamsLoss(f"{spec.kind.upper()} loss needs {need.__name__}, got {type(params).__name__}")


def _log_delta(delta):
    return np.log(delta) if delta > 0 else -np.inf


def _log_ratio(num, den):
    """num - den with the convention 0/0 -> log 1 (both sides -inf)."""
    with np.errstate(invalid="ignore"):
        r = num - den
    return np.where(np.isneginf(num) & np.isneginf(den), 0.0, r)


def _frac(log_part, log_whole):
    """part / whole from logs; 0 where the whole is zero."""
    with np.errstate(invalid="ignore"):
        out = np.exp(log_part - log_whole)
    return np.where(np.isneginf(log_whole), 0.0, out)


def _grouped_logsumexp(values, groups, n):
    top = np.full(n, -np.inf)
    np.maximum.at(top, groups, values)
    safe = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        total = np.bincount(groups, weights=np.exp(values - safe[groups]), minlength=n)
        return np.where(np.isfinite(top), safe + np.log(total), -np.inf)


# ---------------------------------------------------------------------------
# flow matching (state units)


def fm_batch(params: EdgeFlowParams, reward, states, delta=0.0, include_source=False):
    dag = params.dag
    states = np.asarray(states, dtype=np.intp)
    lf = params.all_log_edge_flows(reward)
    lin = _grouped_logsumexp(lf, dag.edge_dst, dag.num_states)
    lout = _grouped_logsumexp(lf, dag.edge_src, dag.num_states)
    ld = _log_delta(delta)
    lin_d = np.logaddexp(ld, lin)
    lout_d = np.logaddexp(ld, lout)
    r_state = _log_ratio(lin_d, lout_d)
    r_state[dag.sink] = 0.0
    if not include_source:
        r_state[dag.source] = 0.0
    r = r_state[states]
    losses = r**2

    weight = np.bincount(states, weights=2.0 * r, minlength=dag.num_states)
    inner = dag.nonterminating_edges
    u, v = dag.edge_src[inner], dag.edge_dst[inner]
    theta = params.log_edge_flow
    grad = np.zeros_like(params.theta)
    g = weight[v] * _frac(theta, lin_d[v]) - weight[u] * _frac(theta, lout_d[u])
    grad[params.layout["log_edge_flow"]] = g
    return losses, grad


def fm_loss_at_state(params: EdgeFlowParams, reward, s, delta=0.0, include_source=False) -> float:
    """Squared log of (delta + in-flow) / (delta + R(s) + inner out-flow) at ``s``.

    Zero at the sink and, unless ``include_source``, at the source.
    """
    return float(fm_batch(params, reward, [s], delta, include_source)[0][0])


# ---------------------------------------------------------------------------
# detailed balance (edge units)


def db_batch(params: ForwardBackwardParams, reward, edges, delta=0.0, log_reward=None):
    """``log_reward`` optionally overrides log R(s) per unit on exit edges
    (stochastic rewards)."""
    dag = params.dag
    edges = np.asarray(edges, dtype=np.intp)
    r_vec = as_reward_vector(dag, reward)
    ld = _log_delta(delta)
    lstate = np.append(params.log_state_flow, -np.inf)
    lpf = params.log_forward()
    inner_pos = _inner_positions(dag)
    lpb = params.log_backward()

    src, dst = dag.edge_src[edges], dag.edge_dst[edges]
    term = dag.is_terminating_edge[edges]
    log_a = lstate[src] + lpf[edges]
    num = np.logaddexp(ld, log_a)
    pos = inner_pos[edges]
    log_b = np.where(term, -np.inf, lstate[dst] + lpb[np.maximum(pos, 0)] if lpb.size else -np.inf)
    if log_reward is None:
        with np.errstate(divide="ignore"):
            log_rw = np.log(r_vec[src])
    else:
        log_rw = np.asarray(log_reward, dtype=float)
    den = np.where(term, np.logaddexp(ld, log_rw), np.logaddexp(ld, log_b))
    r = _log_ratio(num, den)
    losses = r**2

    w = 2.0 * r
    wa = w * _frac(log_a, num)
    wb = np.where(term, 0.0, w * _frac(log_b, den))
    n = dag.num_states
    grad = np.zeros_like(params.theta)

    c_f = np.bincount(edges, weights=wa, minlength=dag.num_edges)
    g_f = np.bincount(src, weights=wa, minlength=n)
    g_b = np.bincount(dst, weights=wb, minlength=n)
    pf = np.exp(lpf)
    grad[params.layout["forward_logits"]] = c_f - pf * g_f[dag.edge_src]
    grad[params.layout["log_state_flow"]] = (g_f - g_b)[:-1]

    if lpb.size:
        inner = dag.nonterminating_edges
        c_b = np.bincount(pos[~term], weights=wb[~term], minlength=inner.size)
        pb = np.exp(lpb)
        grad[params.layout["backward_logits"]] = -(c_b - pb * g_b[dag.edge_dst[inner]])
    return losses, grad


def db_loss_at_edge(params: ForwardBackwardParams, reward, edge, delta=0.0) -> float:
    """Squared log of (delta + F(s)P_F(s'|s)) / (delta + F(s')P_B(s|s')),
    with delta + R(s) in the denominator on exit edges."""
    return float(db_batch(params, reward, [_edge_id(params.dag, edge)], delta)[0][0])


# ---------------------------------------------------------------------------
# trajectory balance (trajectory units)


def tb_batch(params: TrajectoryBalanceParams, reward, batch: TrajectoryBatch, log_reward=None):
    dag = params.dag
    edges = batch.edges
    mask = edges >= 0
    safe = np.where(mask, edges, 0)
    lpf = params.log_forward()
    lpb = params.log_backward()
    inner_pos = _inner_positions(dag)
    pos = inner_pos[safe]
    inner_mask = mask & (pos >= 0)

    term_states = batch.terminal_states()
    if log_reward is None:
        r_vec = as_reward_vector(dag, reward)
        rw = r_vec[term_states]
        if np.any(rw <= 0):
            raise ZeroRewardOnTrajectory(int(term_states[np.argmin(rw)]))
        log_rw = np.log(rw)
    else:
        log_rw = np.asarray(log_reward, dtype=float)

    sum_pf = np.where(mask, lpf[safe], 0.0).sum(axis=1)
    sum_pb = np.where(inner_mask, lpb[np.maximum(pos, 0)] if lpb.size else 0.0, 0.0).sum(axis=1)
    r = params.log_Z + sum_pf - log_rw - sum_pb
    losses = r**2

    w = 2.0 * r
    wf = np.broadcast_to(w[:, None], edges.shape)
    n = dag.num_states
    grad = np.zeros_like(params.theta)
    grad[params.layout["log_Z"]] = w.sum()
    flat_e = edges[mask]
    flat_w = wf[mask]
    c_f = np.bincount(flat_e, weights=flat_w, minlength=dag.num_edges)
    g_f = np.bincount(dag.edge_src[flat_e], weights=flat_w, minlength=n)
    grad[params.layout["forward_logits"]] = c_f - np.exp(lpf) * g_f[dag.edge_src]
    if lpb.size:
        inner = dag.nonterminating_edges
        flat_p = pos[inner_mask]
        flat_wb = wf[inner_mask]
        c_b = np.bincount(flat_p, weights=flat_wb, minlength=inner.size)
        g_b = np.bincount(dag.edge_dst[inner][flat_p], weights=flat_wb, minlength=n)
        grad[params.layout["backward_logits"]] = -(c_b - np.exp(lpb) * g_b[dag.edge_dst[inner]])
    return losses, grad


def tb_loss_at_trajectory(params: TrajectoryBalanceParams, reward, traj) -> float:
    """(log Z + sum log P_F - log R(s_n) - sum log P_B)^2 for one complete trajectory.

    Raises ZeroRewardOnTrajectory when R(s_n) = 0.
    """
    batch = TrajectoryBatch.from_tuples(params.dag, [tuple(traj)])
    return float(tb_batch(params, reward, batch)[0][0])


# ---------------------------------------------------------------------------
# dispatch


def _inner_positions(dag):
    pos = getattr(dag, "_inner_pos", None)
    if pos is None:
        pos = np.full(dag.num_edges, -1, dtype=np.intp)
        pos[dag.nonterminating_edges] = np.arange(dag.nonterminating_edges.size)
        dag._inner_pos = pos
    return pos


def _edge_id(dag, edge):
    if isinstance(edge, (tuple, list)):
        return dag.edge_index[(int(edge[0]), int(edge[1]))]
    return int(edge)


def loss_and_gradient(params, reward, spec: LossSpec, units, log_reward=None):
    """Per-unit losses and the gradient summed over ``units``.

    ``units`` are state ids (FM), edge ids (DB) or a TrajectoryBatch (TB).
    """
    check_compatible(params, spec)
    if spec.kind == "fm":
        return fm_batch(params, reward, units, spec.delta, spec.include_source)
    if spec.kind == "db":
        return db_batch(params, reward, units, spec.delta, log_reward)
    if not isinstance(units, TrajectoryBatch):
        units = TrajectoryBatch.from_tuples(params.dag, [tuple(t) for t in units])
    return tb_batch(params, reward, units, log_reward)


def loss_gradient(params, reward, unit, spec: LossSpec) -> np.ndarray:
    """Gradient of one per-unit loss, aligned with ``params.theta``.

    ``unit`` is a state id (FM), an edge id or ``(s, s')`` pair (DB), or a
    complete trajectory (TB).
    """
    if spec.kind == "fm":
        units = [int(unit)]
    elif spec.kind == "db":
        units = [_edge_id(params.dag, unit)]
    else:
        units = TrajectoryBatch.from_tuples(params.dag, [tuple(unit)])
    return loss_and_gradient(params, reward, spec, units)[1]


def all_units(params, spec: LossSpec, cap=DEFAULT_TRAJECTORY_CAP):
    dag = params.dag
    if spec.kind == "fm":
        start = 0 if spec.include_source else 1
        return np.arange(start, dag.num_states - 1)
    if spec.kind == "db":
        return np.arange(dag.num_edges)
    return TrajectoryBatch.from_tuples(dag, enumerate_complete_trajectories(dag, cap))


def total_loss(params, reward, spec: LossSpec, cap=DEFAULT_TRAJECTORY_CAP) -> float:
    """Sum of per-unit losses over all states, edges or complete trajectories."""
    losses, _ = loss_and_gradient(params, reward, spec, all_units(params, spec, cap))
    return float(np.sum(losses))
