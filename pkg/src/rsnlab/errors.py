"""Exception hierarchy shared by every stage of the pipeline."""


class RsnError(Exception):
    """Base class for all errors raised by rsnlab."""


class GridMismatch(RsnError):
    """Volumes or maps that must share a voxel grid do not."""


class DimensionMismatch(RsnError):
    pass
