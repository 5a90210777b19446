"""Exception hierarchy. Each class carries the CLI exit status it maps to."""


class DualDiffError(Exception):
    exit_code = 1


class ConfigError(DualDiffError, ValueError):
    exit_code = 2


class ShapeError(ConfigError):
    pass


class VocabularyError(ConfigError):
    pass


class DataError(DualDiffError):
    exit_code = 3


class FormatError(DataError):
    pass


class GenerationError(DataError):
    pass


class PathError(DataError):
    pass


class TrainingDivergence(DualDiffError):
    exit_code = 4


class EvaluationError(DualDiffError):
    exit_code = 5


class UndefinedMetricError(EvaluationError, ValueError):
    def __init__(self, metric: str, reason: str = "labels contain a single class"):
        super().__init__(f"{metric} is undefined: {reason}")
        self.metric = metric
