"""
Errors.py

Exception hierarchy for the simulator. Every failure a stage can report derives from
FbnllError so the CLI can catch one type and print a stage-tagged diagnostic.

Classes:
    - FbnllError: Root of the hierarchy.
    - ConfigError: Invalid configuration values or combinations.
    - MalformedFileError / CorruptRecordError: Binary input files that do not decode.
    - InsufficientSamplesError: A class or user has fewer samples than an operation needs.
    - NoiseModelInapplicableError: A noise model cannot be applied to the partition.
    - ShapeError / RankError / NumericError: Linear algebra preconditions.
    - AlignmentError: Embedding rows cannot be matched to sample ids.
    - EmptyUserError: A user holds no samples where samples are required.
    - IncompleteReferenceError: The clean server reference misses a class.
    - AggregationError: A cluster has no members to aggregate.
    - InitializationError: IFCA initialisation exhausted its retry budget.
    - StageError: Wraps any of the above with the pipeline stage it came from.
"""


class FbnllError(Exception):
    """Base class of all simulator errors."""


class ConfigError(FbnllError, ValueError):
    pass


class MalformedFileError(FbnllError):
    pass


class CorruptRecordError(FbnllError):
    pass


class InsufficientSamplesError(FbnllError):
    pass


class NoiseModelInapplicableError(FbnllError):
    pass


class ShapeError(FbnllError, ValueError):
    pass


class RankError(FbnllError, ValueError):
    pass


class NumericError(FbnllError, ArithmeticError):
    pass


class AlignmentError(FbnllError):
    pass


class EmptyUserError(FbnllError):
    pass


class IncompleteReferenceError(FbnllError):
    pass


class AggregationError(FbnllError):
    pass


class InitializationError(FbnllError, RuntimeError):
    pass


class StageError(FbnllError):
    """
    An error raised inside a pipeline stage.

    Args:
        stage (str): Stage tag, e.g. "partition" or "cluster"
        cause (Exception): The original error
    """

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
