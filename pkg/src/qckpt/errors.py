"""Exception hierarchy.

Every error raised by the library derives from :class:`QckptError` so callers
(the CLI in particular) can catch one type.
"""


class QckptError(Exception):
    pass


# container
class FormatError(QckptError):
    pass


class BadMagic(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class ShapeMismatch(QckptError):
    pass


class NonFiniteData(QckptError):
    pass


# sketch
class AlphaOutOfRange(QckptError, ValueError):
    pass


class AlphaMismatch(QckptError, ValueError):
    pass


class EmptySketch(QckptError):
    pass


# ranker / quantizer
class MissingGradients(QckptError):
    pass


class MissingScores(QckptError):
    pass


class TooFewDistinctPoints(QckptError, ValueError):
    pass


class CorruptIndex(QckptError):
    pass


class InvalidConfig(QckptError, ValueError):
    pass


# search
class ExternalEvaluatorFailed(QckptError):
    pass


# codec / chain
class CorruptBitstream(QckptError):
    pass


class ChecksumMismatch(QckptError):
    pass


class UnknownStep(QckptError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ChainCorrupt(QckptError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
