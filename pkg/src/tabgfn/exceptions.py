"""Exception hierarchy shared by every module of the package."""


class TabGFNError(Exception):
    """Base class of all errors raised by tabgfn."""


class DagError(TabGFNError, ValueError):
    """The edge list does not describe a valid pointed DAG."""


class CycleDetected(DagError):
    def __init__(self, states):
        self.states = tuple(states)
        super().__init__(f"graph contains a cycle through states {list(self.states)}")


class NotPointed(DagError):
    UNREACHABLE = "unreachable-from-source"
    DEAD_END = "cannot-reach-sink"

    def __init__(self, state, reason):
        self.state = state
        self.reason = reason
        super().__init__(f"state {state}: {reason}")


class SelfEdge(DagError):
    def __init__(self, state):
        self.state = state
        super().__init__(f"self-edge at state {state}")


class DuplicateEdge(DagError):
    def __init__(self, edge):
        self.edge = tuple(edge)
        super().__init__(f"duplicate edge {self.edge}")


class ExplosionGuard(TabGFNError, RuntimeError):
    """Exact enumeration would exceed the configured trajectory cap."""

    def __init__(self, count, cap):
        self.count = count
        self.cap = cap
        super().__init__(f"{count} trajectories exceed the enumeration cap {cap}")


class InconsistentPolicy(TabGFNError, ValueError):
    """A transition table does not normalize over children (or parents)."""


class ZeroIntermediateFlow(TabGFNError, ValueError):
    def __init__(self, state):
        self.state = state
        super().__init__(f"trajectory traverses state {state} with zero flow")


class RewardUnavailable(TabGFNError, ValueError):
    """The parametrization needs terminal rewards that were not supplied."""


class ZeroRewardOnTrajectory(TabGFNError, ValueError):
    def __init__(self, state):
        self.state = state
        super().__init__(f"trajectory terminates at state {state} with zero reward")


class RewardOutOfRange(TabGFNError, ValueError):
    """Entropy estimation needs every terminal reward strictly inside (0, 1)."""


class IncompatibleParamsLoss(TabGFNError, TypeError):
    pass


class NonFiniteLoss(TabGFNError, FloatingPointError):
    def __init__(self, step, detail=""):
        self.step = step
        super().__init__(f"non-finite loss at step {step}{': ' + detail if detail else ''}")


class EmptyDataset(TabGFNError, ValueError):
    pass


class TooLarge(TabGFNError, ValueError):
    pass


class NoAcceptingReachable(TabGFNError, ValueError):
    pass


class ConfigError(TabGFNError, ValueError):
    pass
