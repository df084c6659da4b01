"""Exception hierarchy.

Everything raised on bad input derives from :class:`ValidationError`, which the
command line maps to exit code 2.
"""


class ValidationError(ValueError):
    """Base class for input that violates a documented precondition."""


# geometry
class GhostCameraProjection(ValidationError):
    pass


class BehindCamera(ValidationError):
    pass


class ZeroDimension(ValidationError):
    pass


class InvalidRig(ValidationError):
    pass


# manifests
class ParseError(ValidationError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.path = path
        self.line = line


class UnknownCategory(ValidationError):
    def __init__(self, label, dataset_id=None, record=None):
        msg = f"no category mapping for raw label {label!r}"
        if dataset_id is not None:
            msg += f" in dataset {dataset_id!r}"
        if record is not None:
            msg += f" (record {record})"
        super().__init__(msg)
        self.label = label
        self.dataset_id = dataset_id
        self.record = record


class TargetTooSmall(ValidationError):
    pass


# pdir
class DegenerateGeometry(ValidationError):
    pass


class VerticalPlane(ValidationError):
    pass


class NonPositiveDepth(ValidationError):
    pass


class NoFrontCamera(ValidationError):
    pass


class InsufficientGroundPoints(ValidationError):
    pass


# experts
class EmptyInput(ValidationError):
    pass


class NonFinitePdir(ValidationError):
    pass


class ZeroMax(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class BadK(ValidationError):
    pass


# metrics
class UnknownSampleId(ValidationError):
    pass


class EmptyGroundTruth(ValidationError):
    pass
