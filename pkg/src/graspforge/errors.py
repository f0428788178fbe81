"""Exception types shared across the engine."""


class GraspForgeError(Exception):
    """Base class for all engine errors."""


class ConfigurationError(GraspForgeError):
    """A layer, model or run was configured inconsistently (bad shapes, bad options)."""


class ContractViolation(GraspForgeError):
    """An operation was called outside its documented preconditions."""


class NonFiniteGradientError(GraspForgeError):
    """An optimizer step received a NaN/Inf gradient; the step was not applied."""


class TrainingDiverged(GraspForgeError):
    """The training loss became non-finite; the last good checkpoint is kept."""


class SceneFileMissingError(GraspForgeError):
    """A scene references a file that does not exist on disk."""


class AnnotationFormatError(GraspForgeError):
    """A grasp annotation file contains a malformed line."""

    def __init__(self, path, line_no, detail):
        super().__init__(f"{path}:{line_no}: {detail}")
        self.path = str(path)
        self.line_no = line_no
        self.detail = detail


class EmptyAnnotationError(GraspForgeError):
    """A training scene has no grasp annotations."""


class CheckpointFormatError(GraspForgeError):
    """A checkpoint file is corrupt or has an unsupported version."""
