"""Exception hierarchy shared by every monorank module."""


class MonorankError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MonorankError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(MonorankError, ArithmeticError):
    """A kernel produced non-finite values."""

    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class ContractError(MonorankError, ValueError):
    """A caller violated an operation's precondition or call protocol."""


class OutOfRangeError(ContractError, IndexError):
    """A layer index or token id lies outside the model's bounds."""


class FormatError(MonorankError, ValueError):
    """On-disk model data does not match the declared format."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ModelNotFoundError(MonorankError, FileNotFoundError):
    """The model directory or its manifest does not exist."""


class LayerLoadError(MonorankError, OSError):
    """Reading a layer's weights failed; the weight stream is poisoned."""

    def __init__(self, layer_index, cause):
        super().__init__(f"failed to load layer {layer_index}: {cause}")
        self.layer_index = layer_index
        self.cause = cause


class SpillError(MonorankError, OSError):
    """Spilling or reloading a hidden-state chunk failed."""

    def __init__(self, chunk_index, cause):
        super().__init__(f"hidden-state spill failed for chunk {chunk_index}: {cause}")
        self.chunk_index = chunk_index
        self.cause = cause


class PlanningError(MonorankError, ValueError):
    """No chunk plan fits the intermediate-tensor budget."""

    def __init__(self, message, min_budget):
        super().__init__(message)
        self.min_budget = min_budget


class ResidencyError(MonorankError, RuntimeError):
    """A memory-residency bound was exceeded."""


class InputError(MonorankError, ValueError):
    """A line-delimited input file is malformed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(MonorankError, ValueError):
    """Run configuration is contradictory or out of range."""
