# ============================================
# core/errors.py
# ============================================


class FisheyeSplatError(Exception):
    """Base class for every error raised by the package."""


class CameraDomainError(FisheyeSplatError):
    """Polar angle, ray or pixel outside the admissible domain of a camera model."""


class ConvergenceError(FisheyeSplatError):
    pass


class SingularFitError(FisheyeSplatError):
    pass


class QuaternionNormError(FisheyeSplatError):
    pass


class NotPositiveDefiniteError(FisheyeSplatError):
    pass


class SchemaError(FisheyeSplatError):
    """Malformed input file. The message names the file and the offending field."""


class ConfigError(FisheyeSplatError):
    """Invalid configuration value or key. The message names the dotted field."""


class SceneVersionError(FisheyeSplatError):
    pass


class TrackRangeError(FisheyeSplatError):
    pass


class TrainingDivergedError(FisheyeSplatError):
    def __init__(self, term: str, value: float, iteration: int):
        super().__init__(f"loss term '{term}' became {value} at iteration {iteration}")
        self.term = term
        self.value = value
        self.iteration = iteration
