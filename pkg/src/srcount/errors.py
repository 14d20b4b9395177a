"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An operand's extents are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """Misuse of the computation record (no active record, non-scalar loss, ...)."""


class DetachedHeadError(RuntimeError):
    """The super-resolution head was requested but its parameters are absent."""


class CheckpointError(ValueError):
    """A checkpoint file is corrupt or disagrees with its own declared shapes."""


class DatasetError(ValueError):
    """A dataset source or manifest is missing pieces or internally inconsistent."""


class TrainingDivergedError(RuntimeError):
    """A loss term became non-finite during optimization."""
