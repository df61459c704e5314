"""Exception types shared across the package.

Every error raised by library code derives from :class:`MedaLudeError` so
callers (notably the command-line front end) can map failures to exit codes
without matching on message text.
"""


class MedaLudeError(Exception):
    """Base class for all package-specific errors."""


class InputError(MedaLudeError):
    """Numeric input contains NaN/Inf or is otherwise unusable."""


class ShapeError(MedaLudeError):
    """Array arguments disagree in shape or dimensionality."""


class EmptyPopulationError(MedaLudeError):
    """An operation that needs at least one sample received none."""


class EmptyClassError(MedaLudeError):
    """A per-class operation found a class with no members."""


class FitnessError(MedaLudeError):
    """A fitness function returned a non-finite value."""


class EmptySurvivorsError(MedaLudeError):
    """A filtering stage rejected every candidate."""


class CacheError(MedaLudeError):
    """A backward pass was handed a cache built for different parameters."""


class GradError(MedaLudeError):
    """An optimizer step received a non-finite gradient."""


class PersistError(MedaLudeError):
    """A model file is malformed or inconsistent with expectations."""


class FormatError(MedaLudeError):
    """A dataset file violates its binary format."""


class DataError(MedaLudeError):
    """Dataset contents cannot satisfy the requested operation."""


class ConfigError(MedaLudeError):
    """A run configuration is malformed, out of range, or has unknown keys."""


class TrainingDivergedError(MedaLudeError):
    """A training phase produced a non-finite loss."""


class UndefinedAUCError(MedaLudeError):
    """AUC is undefined because no class has both positives and negatives."""
