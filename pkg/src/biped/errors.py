"""Exception hierarchy shared by every biped module."""


class BiPedError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(BiPedError, ValueError):
    """Operand extents are incompatible."""


class ContractError(BiPedError, ValueError):
    """A precondition on call arguments was violated."""


class ConfigError(BiPedError, ValueError):
    """Invalid or inconsistent configuration."""


class InputError(BiPedError, ValueError):
    """Malformed input data (labels, class ids, manifests, rasters)."""


class TrainingDivergedError(BiPedError, RuntimeError):
    """A loss term became non-finite during training."""

    def __init__(self, term, epoch, step):
        self.term = term
        self.epoch = epoch
        self.step = step
        super().__init__(f"non-finite loss term {term!r} at epoch {epoch}, step {step}")
