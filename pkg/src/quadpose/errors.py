"""Exception types raised across the pipeline."""


class QuadposeError(Exception):
    """Base class for all pipeline errors."""


class BadInput(QuadposeError, ValueError):
    pass


class DegenerateConfiguration(QuadposeError):
    pass


class BehindCamera(QuadposeError, ValueError):
    pass


class InvalidDepth(QuadposeError, ValueError):
    pass


class ParseError(QuadposeError):
    pass


class EmptyMesh(QuadposeError):
    pass


class NoValidPair(QuadposeError):
    pass


class ShapeMismatch(QuadposeError, ValueError):
    pass


class EmptyRoI(QuadposeError):
    pass


class TooFewCorrespondences(QuadposeError):
    pass


class NoTriplet(QuadposeError):
    pass


class EmptyKeypointSet(QuadposeError):
    pass


class NonFiniteLoss(QuadposeError, FloatingPointError):
    pass


class EmptyDatabase(QuadposeError):
    pass


class DegenerateSample(QuadposeError):
    pass


class NoConsensus(QuadposeError):
    pass


class EmptyInput(QuadposeError, ValueError):
    pass


class FormatError(ParseError):
    """Binary artifact has the wrong magic, size or layout."""
