"""Exception hierarchy shared by every amavc module."""


class AmavcError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(AmavcError):
    """Bad user input: configs, manifests, preconditions. CLI maps these to exit 2."""


class InvariantViolation(ValidationError):
    pass


class BadMagic(ValidationError):
    pass


class DimMismatch(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class TruncatedPayload(ValidationError):
    pass


class NonFiniteValue(ValidationError):
    pass


class ParseError(ValidationError):
    pass


class MissingFile(ValidationError):
    pass


class FrameCountMismatch(ValidationError):
    pass


class UnknownSpeaker(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class DegenerateCorpus(ValidationError):
    pass


class SequenceTooShort(ValidationError):
    pass


class MissingEmbedding(ValidationError):
    pass


class UnexpectedEmbedding(ValidationError):
    pass


class MissingEmbedder(ValidationError):
    pass


class MissingReference(ValidationError):
    pass


class WrongStage(ValidationError):
    pass


class MultipleSpeakers(ValidationError):
    pass


class NegativeLossInput(ValidationError):
    pass


class InsufficientVoicedFrames(ValidationError):
    pass


class EmptyOverlap(ValidationError):
    pass


class IoFailure(AmavcError):
    pass


class NonFiniteLoss(AmavcError):
    """Training diverged. ``batch_ids`` names the utterances of the offending batch."""

    def __init__(self, message, batch_ids=()):
        super().__init__(message)
        self.batch_ids = list(batch_ids)


class StageWarning(UserWarning):
    """An average (non-adapted) checkpoint was used for run-time conversion."""
