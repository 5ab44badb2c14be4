"""Estimator-style wrapper around parametrization, loss and training loop."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .envs import Environment
from .exceptions import ConfigError
from .losses import LossSpec, REQUIRED_PARAMS
from .params import PARAM_KINDS, make_params, terminating_distribution_exact, sample_trajectories
from .training import TrainingConfig, evaluate, train

_DEFAULT_KIND = {"fm": "edge_flow", "db": "forward_backward", "tb": "trajectory_balance"}


def check_environment(env) -> Environment:
    """Return ``env`` if it is a usable environment, raise otherwise."""
    if not isinstance(env, Environment):
        raise TypeError(f"expected an Environment, got {type(env).__name__}")
    r = env.terminal_rewards()
    if not np.all(np.isfinite(r)) or np.any(r < 0) or not r.sum() > 0:
        raise ValueError("terminal rewards must be finite, non-negative and not all zero")
    return env


def check_terminating_states(env: Environment, states) -> np.ndarray:
    """Validate an array of state ids and map each to its terminating position."""
    arr = np.asarray(states)
    if arr.ndim != 1 or not np.issubdtype(arr.dtype, np.integer):
        raise ValueError("states must be a 1-D integer array")
    pos = env.dag.terminal_position
    bad = [int(s) for s in arr if int(s) not in pos]
    if bad:
        raise ValueError(f"not terminating states: {bad[:5]}")
    return np.array([pos[int(s)] for s in arr], dtype=np.intp)


class GFlowNetSampler(BaseEstimator):
    """Fit a tabular GFlowNet to an environment's reward.

    ``fit`` trains on the environment, ``predict_proba`` returns the exact
    terminating distribution of the learned forward policy and ``sample``
    draws terminating states from it.

    Parameters
    ----------
    loss : {"fm", "db", "tb"}
    param_kind : str or None
        Parametrization name; None picks the one the loss needs.
    delta : float
        Smoothing constant of the FM and DB losses.
    backward_frozen : bool
        Keep the backward policy at uniform (DB and TB only).
    """

    def __init__(
        self,
        loss="tb",
        param_kind=None,
        delta=0.0,
        steps=1000,
        batch_size=16,
        learning_rate=1e-2,
        optimizer="adam",
        exploration_epsilon=0.0,
        backward_frozen=False,
        eval_every=100,
        random_state=0,
    ):
        self.loss = loss
        self.param_kind = param_kind
        self.delta = delta
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.exploration_epsilon = exploration_epsilon
        self.backward_frozen = backward_frozen
        self.eval_every = eval_every
        self.random_state = random_state

    def _config(self):
        spec = LossSpec(self.loss, delta=self.delta)
        kind = self.param_kind or _DEFAULT_KIND[spec.kind]
        if kind not in PARAM_KINDS:
            raise ConfigError(f"unknown parametrization {kind!r}")
        if not issubclass(PARAM_KINDS[kind], REQUIRED_PARAMS[spec.kind]):
            raise ConfigError(f"loss {spec.kind!r} cannot train a {kind!r} parametrization")
        config = TrainingConfig(
            loss=spec,
            steps=self.steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            optimizer=self.optimizer,
            exploration_epsilon=self.exploration_epsilon,
            seed=int(self.random_state),
            eval_every=self.eval_every,
        )
        return kind, config

    def fit(self, env, y=None, source=None):
        env = check_environment(env)
        kind, config = self._config()
        params = make_params(kind, env.dag, backward_frozen=self.backward_frozen)
        report = train(env, params, config, source=source)
        self.env_ = env
        self.params_ = report.params
        self.report_ = report
        self.n_terminating_ = len(env.terminating_states)
        return self

    def predict_proba(self, X=None):
        """Learned P_T over ``dag.terminating_states``, or at the states in ``X``."""
        check_is_fitted(self, "params_")
        p = terminating_distribution_exact(self.params_, self.env_.reward)
        if X is None:
            return p
        return p[check_terminating_states(self.env_, X)]

    def predict(self, X):
        """The most likely terminating state among each row of candidates in ``X``."""
        check_is_fitted(self, "params_")
        X = np.atleast_2d(np.asarray(X))
        p = self.predict_proba(X.ravel()).reshape(X.shape)
        return X[np.arange(len(X)), np.argmax(p, axis=1)]

    def sample(self, n, random_state=None):
        """Terminating states of ``n`` trajectories drawn from the learned policy."""
        check_is_fitted(self, "params_")
        rng = np.random.default_rng(self.random_state if random_state is None else random_state)
        batch = sample_trajectories(self.params_, self.env_.reward, rng, int(n))
        return batch.terminal_states()

    def score(self, env=None, y=None):
        """Negative L1 distance between the learned P_T and R / Z."""
        check_is_fitted(self, "params_")
        env = self.env_ if env is None else check_environment(env)
        return -evaluate(self.params_, env).l1
