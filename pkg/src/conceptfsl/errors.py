"""Exception types raised by the library."""


class ConceptFSLError(Exception):
    """Base class for all library errors."""


class DataError(ConceptFSLError, ValueError):
    """Dataset ingestion or schema problem."""


class ConfigError(ConceptFSLError, ValueError):
    """Invalid configuration value or file."""


class SamplingError(ConceptFSLError, ValueError):
    """A split cannot satisfy an episode request."""


class TrainingError(ConceptFSLError, RuntimeError):
    pass


class ContainerError(ConceptFSLError):
    """Model container could not be read."""


class CorruptContainerError(ContainerError):
    pass


class ContainerVersionError(ContainerError):
    pass
