"""Exception hierarchy shared by every glab module."""


class GlabError(Exception):
    """Base class for all library errors."""


class DimensionError(GlabError, ValueError):
    """Operand shapes do not conform."""


class NumericError(GlabError, FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


class ContractError(GlabError, ValueError):
    """A precondition of a public operation was violated."""


class GraphError(ContractError, RuntimeError):
    """Misuse of the autodiff tape (non-scalar root, consumed graph, ...)."""


class DegenerateInputError(GlabError, ValueError):
    """Input is valid in shape but degenerate in value, e.g. a zero-norm vector."""


class ConfigurationError(GlabError, ValueError):
    """Invalid model, attack or experiment configuration."""


class FormatError(GlabError, ValueError):
    """A binary or text file does not follow the expected layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(FormatError):
    """A file declares a container version this build does not read."""


class MismatchError(GlabError, ValueError):
    """A gradient capture does not belong to the model it is used with."""


class AmbiguousLabelError(GlabError, ValueError):
    """Sign-based label inference did not single out one class."""

    def __init__(self, message, candidates=()):
        super().__init__(message)
        self.candidates = list(candidates)


class AttackError(GlabError, RuntimeError):
    """Every restart of an attack failed."""


class GenerationError(GlabError, RuntimeError):
    """Synthetic data generation could not satisfy its placement constraints."""
