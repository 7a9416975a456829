"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PapmaskError(Exception):
    exit_code = 5
    kind = "internal"


class DataError(PapmaskError, ValueError):
    """Malformed input data: manifests, images, configs."""

    exit_code = 3
    kind = "data-error"


class InvalidMeasurement(DataError):
    kind = "invalid-measurement"


class ModelFormatError(DataError):
    """A model or weight file is truncated, corrupt or incompatible."""

    kind = "model-format"


class StageFailure(PapmaskError):
    """A pipeline stage found nothing to work with (face, nose or coin)."""

    exit_code = 4

    def __init__(self, stage, message=None):
        self.stage = stage
        self.kind = f"{stage}-not-found"
        super().__init__(message or f"{stage} not found")


class DivergenceError(PapmaskError):
    kind = "divergence"

    def __init__(self, epoch, loss):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}")


class SampleSkipped(PapmaskError):
    """Raised by the coin compositor when no in-bounds placement was found."""

    kind = "sample-skipped"
