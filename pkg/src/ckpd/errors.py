"""Exception types shared across the library."""


class CkpdError(Exception):
    """Base class for all library errors."""


class ShapeError(CkpdError):
    """Operand dimensions are incompatible."""


class NumericalFailure(CkpdError):
    """An iterative numerical routine failed to converge."""


class RegularizationFailure(CkpdError):
    """Doubling schedule exhausted without an acceptable inverse."""


class DegenerateCovariance(CkpdError):
    """Covariance input carries no usable signal (all-zero or empty)."""


class DegenerateInput(CkpdError):
    """A vector that must be normalized has zero norm."""


class DuplicateClass(CkpdError):
    """Class id already present in the exemplar buffer."""


class EmptyClass(CkpdError):
    """A class was offered to the buffer with no samples."""


class EmptyBuffer(CkpdError):
    """Operation requires at least one stored exemplar."""


class RankTooLarge(CkpdError):
    """Requested adapter rank reaches or exceeds the full rank."""


class InvalidRank(CkpdError):
    """Rank parameter outside the valid range for the given spectrum."""


class ZeroEnergy(CkpdError):
    """Sensitivity ratio is undefined for an all-zero spectrum."""


class TooManyLayers(CkpdError):
    """Selection count exceeds the number of layers."""


class UnknownLabel(CkpdError):
    """A training label has no prototype."""


class InvalidSpec(CkpdError):
    """Session specification violates its invariants."""


class InvalidStrategy(CkpdError):
    """Unknown adaptation strategy name."""


class InvalidRate(CkpdError):
    """Dropout rate outside [0, 1)."""


class FormatError(CkpdError):
    """A serialized file has wrong magic, shape, or content."""


class ConfigError(CkpdError):
    """Experiment configuration failed validation."""
