"""Exception types raised across the package."""


class SpecError(ValueError):
    """A network or model specification cannot be built."""


class ModeError(ValueError):
    """Operation is not defined for the network's mode (deterministic/variational)."""


class ConfigError(ValueError):
    """Experiment or CLI configuration is inconsistent or incomplete."""


class SchedulerStateError(RuntimeError):
    """Learning-rate scheduler used out of order."""


class FormatError(IOError):
    """A file does not follow the expected container layout."""


class VersionError(FormatError):
    """Container magic or format version does not match what this code reads."""
