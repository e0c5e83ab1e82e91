"""Exception types raised across the reconstruction stack."""


class SfmSplatError(Exception):
    """Base class for all library errors."""


class NonPositiveDepth(SfmSplatError):
    """A point lies on or behind the camera plane."""


class InfeasibleLayout(SfmSplatError):
    pass


class EmptyGraph(SfmSplatError):
    pass


class DegenerateConfiguration(SfmSplatError):
    pass


class CheiralityAmbiguous(SfmSplatError):
    pass


class NoConvergence(SfmSplatError):
    pass


class DisconnectedGraph(SfmSplatError):
    pass


class RankDeficient(SfmSplatError):
    pass


class NumericalFailure(SfmSplatError):
    pass


class TooFewObservations(SfmSplatError):
    pass


class TooFewPoints(SfmSplatError):
    pass


class Divergence(SfmSplatError):
    pass


class DegenerateAlignment(SfmSplatError):
    pass


class StageError(SfmSplatError):
    """Wraps the first failure of a pipeline stage with the stage label."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
