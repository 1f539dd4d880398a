"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes: contract/config problems are
usage errors (2), numeric failures during training or sampling are 3,
file-format problems are 4.
"""


class FlagLabError(Exception):
    """Base class for all package errors."""


class ContractError(FlagLabError, ValueError):
    """A caller violated a documented precondition (bad shape, domain, k >= N, ...)."""


class ConfigError(FlagLabError, ValueError):
    """Invalid or unknown configuration keys/values."""


class TrainingError(FlagLabError, RuntimeError):
    """Non-finite losses, gradients or model outputs during training."""


class SamplerDivergenceError(FlagLabError, RuntimeError):
    """The ODE sampler produced a non-finite state.

    Carries the failing step index so a run log can point at the step.
    """

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class ConstructionError(FlagLabError, RuntimeError):
    """A derived object (e.g. a synthetic covariance) could not be built soundly."""


class FileFormatError(FlagLabError, ValueError):
    """A slide/embedding/checkpoint file failed to parse; names the offending field."""


class UndefinedMetricError(FlagLabError, ValueError):
    """A metric is mathematically undefined for the given input (e.g. zero variance)."""
