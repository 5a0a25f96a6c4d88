"""Exception types raised across the package."""


class LifeloopError(Exception):
    """Base class; ``code`` mirrors the documented error name."""

    code = "ERROR"


class PlacementFailure(LifeloopError):
    code = "PLACEMENT_FAILURE"


class PoseInCollision(LifeloopError):
    code = "POSE_IN_COLLISION"


class UnknownObjectId(LifeloopError):
    code = "UNKNOWN_OBJECT_ID"


class DimensionMismatch(LifeloopError):
    code = "DIMENSION_MISMATCH"


class DomainError(LifeloopError, ValueError):
    code = "DOMAIN"


class StartInCollision(LifeloopError):
    code = "START_IN_COLLISION"


class EmptyLog(LifeloopError):
    code = "EMPTY_LOG"


class InvalidScene(LifeloopError):
    code = "INVALID_SCENE"


class NoPath(LifeloopError):
    code = "NO_PATH"


class PlanningTimeout(LifeloopError):
    code = "PLANNING_TIMEOUT"


class NoValidTemplate(LifeloopError):
    code = "NO_VALID_TEMPLATE"


class InsufficientFeasibleTasks(LifeloopError):
    code = "INSUFFICIENT_FEASIBLE_TASKS"


class NonFiniteParams(LifeloopError):
    code = "NON_FINITE_PARAMS"


class LabelOutOfRange(LifeloopError):
    code = "LABEL_OUT_OF_RANGE"


class EmptyDataset(LifeloopError):
    code = "EMPTY_DATASET"


class EmptyRollout(LifeloopError):
    code = "EMPTY_ROLLOUT"


class ConfigError(LifeloopError):
    code = "CONFIG_ERROR"


class StageError(LifeloopError):
    """Wraps a stage failure with the iteration it happened in."""

    code = "STAGE_ERROR"

    def __init__(self, stage: str, iteration: int, cause: Exception):
        super().__init__(f"iteration {iteration}, stage {stage}: {cause}")
        self.stage = stage
        self.iteration = iteration
        self.cause = cause
