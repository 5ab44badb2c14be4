"""Experiment configuration files.

A config is a TOML document with the sections ``environment``,
``parametrization``, ``loss``, ``training``, ``source``, ``analysis`` and
``output``.  Everything is validated before any work starts; problems raise
:class:`~tabgfn.exceptions.ConfigError`.
"""
from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .envs import ENV_BUILDERS, Environment, make_env
from .exceptions import ConfigError, TabGFNError
from .losses import REQUIRED_PARAMS, LossSpec
from .params import PARAM_KINDS, TabularParams, make_params
from .training import BackwardFromData, EpsilonUniformMix, Mixture, OfflineReplay, OnPolicy, TrainingConfig

SECTIONS = ("environment", "parametrization", "loss", "training", "source", "analysis", "output")
_TRAINING_KEYS = {f.name for f in fields(TrainingConfig)} - {"loss"}
_ANALYSIS_DEFAULTS = {"entropy": True, "expected_reward": True, "anchors": []}


@dataclass
class ExperimentConfig:
    environment: dict
    parametrization: dict = field(default_factory=lambda: {"kind": "trajectory_balance"})
    loss: LossSpec = field(default_factory=LossSpec)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    source: dict = field(default_factory=lambda: {"kind": "auto"})
    analysis: dict = field(default_factory=lambda: dict(_ANALYSIS_DEFAULTS))
    output_dir: str = "out"
    base_dir: str = "."
    raw: dict = field(default_factory=dict, repr=False)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, training=replace(self.training, seed=int(seed)))

    def build_env(self) -> Environment:
        kw = dict(self.environment)
        kind = kw.pop("kind")
        if kind == "file":
            kw["path"] = self.resolve(kw["path"])
        try:
            return make_env(kind, **kw)
        except TypeError as exc:
            raise ConfigError(f"environment {kind!r}: {exc}") from None

    def build_params(self, env: Environment) -> TabularParams:
        p = self.parametrization
        return make_params(p["kind"], env.dag, backward_frozen=p.get("backward_frozen", False))

    def build_source(self, env: Environment):
        return _build_source(self.source, env)

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(raw, base_dir=os.path.dirname(os.path.abspath(path)))


def parse_config(raw: dict, base_dir=".") -> ExperimentConfig:
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    if "environment" not in raw or "kind" not in raw["environment"]:
        raise ConfigError("[environment] with a 'kind' key is required")
    env = dict(raw["environment"])
    if env["kind"] not in ENV_BUILDERS:
        raise ConfigError(f"unknown environment kind {env['kind']!r}; choose from {sorted(ENV_BUILDERS)}")
    if env["kind"] == "file":
        if "path" not in env:
            raise ConfigError("file environments need a 'path'")
        full = env["path"] if os.path.isabs(env["path"]) else os.path.join(base_dir, env["path"])
        if not os.path.exists(full):
            raise ConfigError(f"environment file not found: {full}")

    try:
        loss = LossSpec(**raw.get("loss", {}))
    except TypeError as exc:
        raise ConfigError(f"[loss]: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"[loss]: {exc}") from None

    param = dict(raw.get("parametrization", {}))
    param.setdefault("kind", _default_param_kind(loss.kind))
    extra = set(param) - {"kind", "backward_frozen"}
    if extra:
        raise ConfigError(f"[parametrization]: unknown keys {sorted(extra)}")
    if param["kind"] not in PARAM_KINDS:
        raise ConfigError(f"unknown parametrization {param['kind']!r}; choose from {sorted(PARAM_KINDS)}")
    if not issubclass(PARAM_KINDS[param["kind"]], REQUIRED_PARAMS[loss.kind]):
        raise ConfigError(f"loss {loss.kind!r} is incompatible with parametrization {param['kind']!r}")

    train_kw = dict(raw.get("training", {}))
    extra = set(train_kw) - _TRAINING_KEYS
    if extra:
        raise ConfigError(f"[training]: unknown keys {sorted(extra)}")
    try:
        training = TrainingConfig(loss=loss, **train_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[training]: {exc}") from None

    source = dict(raw.get("source", {"kind": "auto"}))
    _check_source(source)

    analysis = dict(_ANALYSIS_DEFAULTS)
    extra = set(raw.get("analysis", {})) - set(_ANALYSIS_DEFAULTS)
    if extra:
        raise ConfigError(f"[analysis]: unknown keys {sorted(extra)}")
    analysis.update(raw.get("analysis", {}))

    output = dict(raw.get("output", {}))
    extra = set(output) - {"dir"}
    if extra:
        raise ConfigError(f"[output]: unknown keys {sorted(extra)}")
    return ExperimentConfig(
        environment=env,
        parametrization=param,
        loss=loss,
        training=training,
        source=source,
        analysis=analysis,
        output_dir=output.get("dir", "out"),
        base_dir=base_dir,
        raw=raw,
    )


def _default_param_kind(loss_kind):
    return {"fm": "edge_flow", "db": "forward_backward", "tb": "trajectory_balance"}[loss_kind]


_SOURCE_KEYS = {
    "auto": set(),
    "on_policy": set(),
    "epsilon_uniform": {"epsilon"},
    "offline": {"trajectories"},
    "backward_from_data": {"states", "top_k", "weights"},
    "mixture": {"components"},
}


def _check_source(spec, nested=False):
    kind = spec.get("kind", "auto")
    if kind not in _SOURCE_KEYS or (nested and kind in ("auto", "mixture")):
        raise ConfigError(f"unknown or misplaced source kind {kind!r}")
    extra = set(spec) - _SOURCE_KEYS[kind] - {"kind", "weight"}
    if extra:
        raise ConfigError(f"[source] {kind}: unknown keys {sorted(extra)}")
    if kind == "backward_from_data" and ("states" in spec) == ("top_k" in spec):
        raise ConfigError("backward_from_data needs exactly one of 'states' or 'top_k'")
    if kind == "offline" and not spec.get("trajectories"):
        raise ConfigError("offline source needs a non-empty 'trajectories' list")
    if kind == "mixture":
        comps = spec.get("components") or []
        if not comps:
            raise ConfigError("mixture source needs components")
        for c in comps:
            if "weight" not in c:
                raise ConfigError("every mixture component needs a 'weight'")
            _check_source(c, nested=True)


def top_reward_states(env: Environment, k: int):
    """The ``k`` highest-reward terminating states, ties to the lower index."""
    term = np.array(env.terminating_states)
    order = np.lexsort((term, -env.reward[term]))
    return tuple(int(s) for s in term[order[:k]])


def _build_source(spec, env):
    kind = spec.get("kind", "auto")
    try:
        if kind == "auto":
            return None
        if kind == "on_policy":
            return OnPolicy()
        if kind == "epsilon_uniform":
            return EpsilonUniformMix(spec.get("epsilon", 0.1))
        if kind == "offline":
            return OfflineReplay(spec["trajectories"])
        if kind == "backward_from_data":
            states = spec["states"] if "states" in spec else top_reward_states(env, int(spec["top_k"]))
            bad = [s for s in states if not env.dag.is_terminating(int(s))]
            if bad:
                raise ValueError(f"not terminating states: {bad}")
            return BackwardFromData(states, weights=spec.get("weights"))
        return Mixture(tuple((c["weight"], _build_source(c, env)) for c in spec["components"]))
    except (TabGFNError, ValueError) as exc:
        raise ConfigError(f"[source] {kind}: {exc}") from None
