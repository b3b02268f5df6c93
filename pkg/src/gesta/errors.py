class GestaError(Exception):
    """Base class for all package errors."""


class InvalidStreamlineError(GestaError, ValueError):
    pass


class GeometryMismatchError(GestaError, ValueError):
    pass


class FormatError(GestaError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingFailureError(GestaError, RuntimeError):
    def __init__(self, message, epoch):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class InsufficientSeedsError(GestaError, ValueError):
    pass


class EnvelopeFailureError(GestaError, RuntimeError):
    pass


class SamplerStalledError(GestaError, RuntimeError):
    def __init__(self, message, accepted, stats):
        super().__init__(message)
        self.accepted = accepted
        self.stats = stats


class UndefinedMetricError(GestaError, ValueError):
    pass


class SpecError(GestaError, ValueError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        super().__init__("; ".join(problems))
        self.problems = list(problems)
