"""Error taxonomy shared by every module and mapped to CLI exit codes.

Each exception's ``code`` is its class name; the CLI prints it in the
single-line ``ERROR <code>: <detail>`` diagnostic.
"""


class TerraposeError(Exception):
    """Base class for all validation and input errors (CLI exit 2)."""

    @property
    def code(self) -> str:
        return type(self).__name__


class NumericalFailure(TerraposeError):
    """Base class for failures of the numerics themselves (CLI exit 3)."""


# terrain
class MissingHeaderKey(TerraposeError):
    pass


class NonRectangularBody(TerraposeError):
    pass


class UnparsableNumber(TerraposeError):
    pass


class OutOfExtent(TerraposeError):
    pass


class NodataNeighborhood(TerraposeError):
    pass


class InvalidShapeParam(TerraposeError):
    pass


# camera
class BehindCamera(TerraposeError):
    pass


class NonPositiveInput(TerraposeError):
    pass


# panorama
class CameraOutsideGrid(TerraposeError):
    pass


# orient
class AllColumnsInvalid(TerraposeError):
    pass


class TooFewValidColumns(TerraposeError):
    pass


class DegenerateFit(TerraposeError):
    pass


class QueryTooSmallForScale(TerraposeError):
    pass


# pepalp
class TooFewCorrespondences(TerraposeError):
    pass


class DegenerateCoplanar(TerraposeError):
    pass


class NoConsensus(NumericalFailure):
    pass


class NoVisibleLandmarks(TerraposeError):
    pass


class NonPsdPrior(TerraposeError):
    pass


class SingularInnovation(NumericalFailure):
    pass


# topdown
class NonPositiveHeight(TerraposeError):
    pass


class NoKeypoints(TerraposeError):
    pass


class TooFewMatches(TerraposeError):
    pass


class FootprintOutsideAerial(TerraposeError):
    pass


# geofuse
class AtOrAboveHorizon(TerraposeError):
    pass


class EmptyInput(TerraposeError):
    pass


class TooManyProposals(TerraposeError):
    pass


class TooFewPositions(TerraposeError):
    pass


# cli
class UnknownSubcommand(TerraposeError):
    pass
