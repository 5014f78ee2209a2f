"""
Exception hierarchy shared by the core modules.
"""


class RPGError(Exception):
    """Base class for every error raised by latent_rpg."""


class GraphError(RPGError):
    """Domain violation or misuse of the differentiation graph."""


class EnvError(RPGError):
    """Invalid environment id, action or state."""


class PolicyError(RPGError):
    """Inconsistent policy, latent or encoder configuration."""


class ReplayError(RPGError):
    """Replay buffer misuse (cross-episode segments, empty buffer)."""


class OracleError(RPGError):
    """Quadrature oracle not applicable or not converged."""


class ConfigError(RPGError):
    """Invalid configuration file or override."""

    def __init__(self, message: str, line: int = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrainingDivergence(RPGError):
    """A training loss or gradient became non-finite."""


class CheckpointError(RPGError):
    """Missing, malformed or mismatched checkpoint files."""


class EvaluationError(RPGError):
    """Invalid evaluation request."""


class GradCheckFailed(RPGError):
    """At least one gradient-check case exceeded the tolerance."""
