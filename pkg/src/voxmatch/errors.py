"""Exception and warning types raised across the package."""


class VoxmatchError(Exception):
    """Base class for all errors raised by voxmatch."""


class ParseError(VoxmatchError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class EmptyInput(VoxmatchError):
    pass


class DegenerateGraph(VoxmatchError):
    pass


class InsufficientNodes(VoxmatchError):
    pass


class SolverFailure(VoxmatchError):
    pass


class DimensionMismatch(VoxmatchError, ValueError):
    pass


class RangeTooSmall(VoxmatchError, ValueError):
    pass


class BinMismatch(VoxmatchError, ValueError):
    pass


class NoRetainedPairs(VoxmatchError):
    pass


class DegenerateSpectrum(VoxmatchError):
    pass


class SingularCovariance(VoxmatchError):
    pass


class ZeroInlierMass(VoxmatchError):
    pass


class InvalidPose(VoxmatchError, ValueError):
    pass


class MissingTruth(VoxmatchError):
    pass


class PipelineError(VoxmatchError):
    """Wraps a failure with the name of the pipeline stage that raised it."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


class DuplicateWarning(UserWarning):
    pass


class DegenerateCrossCovariance(UserWarning):
    pass


class NonIncreasingLikelihood(UserWarning):
    pass
