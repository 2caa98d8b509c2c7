"""Exception types shared across the pipeline."""


class VoxelsegError(Exception):
    """Base class for all pipeline errors."""


class ShapeError(VoxelsegError):
    """Tensor shapes incompatible with the requested operation."""


class GraphError(VoxelsegError):
    """Autodiff tape is malformed (missing producer or out-of-order node)."""


class ConfigError(VoxelsegError):
    """Configuration is invalid or inconsistent with the data."""


class FormatError(VoxelsegError):
    """A volume file failed to parse; message carries the byte offset."""


class DimensionMismatch(VoxelsegError):
    """Paired grids do not share dimensions."""


class EmptyBrainMask(VoxelsegError):
    """A modality has fewer than two non-zero voxels."""


class CheckpointError(VoxelsegError):
    """Checkpoint file missing, corrupt, or from an unknown format version."""


class DivergenceError(VoxelsegError):
    """Training loss became non-finite; last good checkpoint is retained."""
