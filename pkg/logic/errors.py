"""Exception hierarchy; the CLI maps each family to an exit status."""


class BusyPerturbError(Exception):
    """Root of every error raised on purpose by busyperturb"""
    exit_code = 1


class ConfigError(BusyPerturbError, ValueError):
    """Experiment file cannot be parsed or names something unknown"""
    exit_code = 2


class ValidationError(BusyPerturbError, ValueError):
    """Model parameters violate a modelling assumption"""
    exit_code = 3


class InstabilityError(ValidationError):
    """Arrival rate reaches the (possibly reduced) service rate"""


class H1ViolationError(ValidationError):
    """Perturbation is not bounded on the reachable environment states"""


class H2ViolationError(ValidationError):
    """eps * sup|p| is not below the base service rate"""


class GeneratorError(ValidationError):
    """Malformed CTMC generator matrix"""


class DomainError(ValidationError):
    """Argument outside the domain of a closed-form expression"""


class SignPatternError(ValidationError):
    """Perturbation sign pattern does not match the requested formula"""


class SimulationAbort(BusyPerturbError, RuntimeError):
    exit_code = 4


class ReplicaAborted(SimulationAbort):
    """One replica hit the event cap or produced simultaneous points"""

    def __init__(self, reason: str, events: int = 0):
        super().__init__(reason)
        self.reason = reason
        self.events = events


class AbortBudgetExceeded(SimulationAbort):
    """Too many replicas aborted for the estimate to be trusted"""
