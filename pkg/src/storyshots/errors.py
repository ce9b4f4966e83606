"""Exception types shared across the package."""


class StoryshotsError(Exception):
    """Base class for all package errors."""


class DimensionError(StoryshotsError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(StoryshotsError, ValueError):
    """A softmax row has no finite logit to normalize over."""


class UndefinedSimilarityError(StoryshotsError, ValueError):
    """Cosine similarity requested between two zero vectors."""


class ConfigError(StoryshotsError, ValueError):
    """Invalid configuration value or combination."""


class ScheduleRangeError(ConfigError):
    """Timestep outside the noise schedule."""


class WindowError(StoryshotsError, ValueError):
    """Operation invoked outside its scheduled timestep window."""


class CacheMissError(StoryshotsError, KeyError):
    """Requested (timestep, layer) entry was never cached."""


class ReproducibilityError(StoryshotsError, RuntimeError):
    """RNG fingerprints of dependent passes do not match."""


class IntegrityError(StoryshotsError, RuntimeError):
    """A correspondence map was used against a mismatched anchor."""


class InsufficientShotsError(ConfigError):
    """A metric requires more shots than were provided."""


class PromptError(ConfigError):
    """Prompt file failed validation."""
