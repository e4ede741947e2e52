"""Exception types shared across the package."""


class DeskSSLError(Exception):
    """Base class for all package errors."""


class DimensionError(DeskSSLError):
    """Operand shapes are incompatible with the requested operation."""


class ParameterError(DeskSSLError):
    """A numeric argument is outside its valid range."""


class ContractViolation(DeskSSLError):
    """A caller broke a documented precondition (e.g. gradient on a stop-grad input)."""


class NumericError(DeskSSLError):
    """Non-finite values appeared where the pipeline requires finite math."""


class GradCheckError(DeskSSLError):
    """The gradient checker could not run (e.g. the function is non-deterministic)."""


class PlanError(DeskSSLError):
    """A mask plan references token positions that do not exist."""


class ConfigError(DeskSSLError):
    """Invalid or unknown configuration input."""


class FormatError(DeskSSLError):
    """A binary input file does not match its documented layout."""


class ProbeError(DeskSSLError):
    """An evaluation probe received degenerate inputs."""


class StateError(DeskSSLError):
    """Training state is inconsistent (shape drift, corrupted buffers)."""


class CheckpointError(DeskSSLError):
    """Checkpoint blob or manifest failed verification."""


class MigrationError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class HarnessError(DeskSSLError):
    """Experiment-harness misuse: bad schedule step, unknown run, bad verb."""
