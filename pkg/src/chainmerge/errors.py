"""Exception hierarchy shared by all chainmerge modules."""


class ChainMergeError(Exception):
    """Base class for every error raised by this package."""


class InvalidShape(ChainMergeError, ValueError):
    pass


class NotSymmetric(ChainMergeError, ValueError):
    pass


class NotPSD(ChainMergeError, ValueError):
    pass


class ArchitectureMismatch(ChainMergeError, ValueError):
    pass


class InsufficientSamples(ChainMergeError, ValueError):
    pass


class InvalidModel(ChainMergeError, ValueError):
    pass


class UnsupportedVersion(ChainMergeError):
    pass


class CorruptCheckpoint(ChainMergeError):
    pass


class NotAMatrixFile(ChainMergeError):
    pass
