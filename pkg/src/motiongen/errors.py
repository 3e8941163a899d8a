"""Exception types shared across the toolkit."""


class MotionGenError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(MotionGenError):
    """A configuration object violates its invariants."""


class ContractError(MotionGenError):
    """An argument has the wrong shape, size, or ordering."""


class RangeError(MotionGenError):
    """A query falls outside the valid domain (time grid, noise level)."""


class NumericalError(MotionGenError):
    """A linear solve or decomposition is too ill-conditioned to trust."""


class TrainingError(MotionGenError):
    """Non-finite loss or gradients during optimization."""


class SamplingError(MotionGenError):
    """Non-finite intermediate state while solving the sampling ODE."""


class SimulationError(MotionGenError):
    """Simulator state became non-finite."""


class GenerationError(MotionGenError):
    """A scripted demonstration failed its success check after retries."""


class CheckpointError(MotionGenError):
    """Base class for checkpoint I/O failures."""


class CheckpointVersionError(CheckpointError):
    """Magic string or format version does not match."""


class CheckpointCorruptError(CheckpointError):
    """Checkpoint file is truncated or structurally invalid."""


class CheckpointDimensionError(CheckpointError):
    """Checkpoint dimensions disagree with the runtime configuration."""
