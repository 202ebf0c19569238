"""Exception hierarchy.

Validation problems (bad input, impossible designs) derive from
``ValidationError``; numerical failures while fitting derive from
``FitError``.  The CLI maps the two families to distinct exit codes.
"""


class SwmrsError(Exception):
    """Base class for all package errors."""

    code = "error"

    def __init__(self, message="", **context):
        super().__init__(message)
        self.context = context

    def to_dict(self):
        return {"error": type(self).__name__, "message": str(self), **{
            k: (v if isinstance(v, (int, float, str, bool, type(None))) else str(v))
            for k, v in self.context.items()
        }}


class ValidationError(SwmrsError):
    pass


class FitError(SwmrsError):
    pass


class MissingColumn(ValidationError):
    def __init__(self, column):
        super().__init__(f"required column {column!r} not found", column=column)


class NonNumericValue(ValidationError):
    def __init__(self, row, column, value=None):
        super().__init__(f"non-numeric value {value!r} in column {column!r} at row {row}",
                         row=row, column=column)


class InvalidTreatmentValue(ValidationError):
    def __init__(self, row, value):
        super().__init__(f"treatment must be 0 or 1, got {value!r} at row {row}", row=row)


class MixedTreatmentWithinCell(ValidationError):
    def __init__(self, cluster, period):
        super().__init__(f"treatment varies within cluster {cluster!r}, period {period!r}",
                         cluster=cluster, period=period)


class MonotonicityViolation(ValidationError):
    def __init__(self, cluster):
        super().__init__(f"cluster {cluster!r} leaves treatment after adopting it", cluster=cluster)


class TooFewPeriods(ValidationError):
    def __init__(self, n_periods):
        super().__init__(f"need at least 3 periods, got {n_periods}", n_periods=n_periods)


class NoRolloutPeriod(ValidationError):
    def __init__(self, period):
        super().__init__(f"period {period} has no treatment variation between clusters", period=period)


class BaselineTreated(ValidationError):
    def __init__(self, cluster):
        super().__init__(f"cluster {cluster!r} is treated in the first period", cluster=cluster)


class FinalPeriodUntreated(ValidationError):
    def __init__(self, cluster):
        super().__init__(f"cluster {cluster!r} is untreated in the final period", cluster=cluster)


class EmptyCell(ValidationError):
    def __init__(self, cluster, period):
        super().__init__(f"cluster {cluster!r} has no individuals in period {period}",
                         cluster=cluster, period=period)


class ZeroClusterTotal(ValidationError):
    def __init__(self, cluster):
        super().__init__(f"cluster {cluster!r} has no individuals in any period", cluster=cluster)


class EmptyArmInPeriod(ValidationError):
    def __init__(self, period, arm):
        super().__init__(f"arm z={arm} has zero weight in period {period}", period=period, arm=arm)


class ScaleDomainError(ValidationError):
    def __init__(self, scale, value):
        super().__init__(f"value {value!r} outside the domain of the {scale} contrast",
                         scale=scale, value=value)


class PeriodOutOfRange(ValidationError):
    def __init__(self, period, n_periods):
        super().__init__(f"period {period} is not a rollout period of a {n_periods}-period design",
                         period=period)


class PredictionMissing(ValidationError):
    def __init__(self, cluster):
        super().__init__(f"no prediction for cluster {cluster!r}", cluster=cluster)


class UnfittedModel(ValidationError):
    def __init__(self):
        super().__init__("model has not been fitted")


class InvalidModelSpec(ValidationError):
    def __init__(self, message):
        super().__init__(message)


class RankDeficientDesign(FitError):
    def __init__(self, rank, n_columns):
        super().__init__(f"design matrix has rank {rank} < {n_columns} columns",
                         rank=rank, n_columns=n_columns)


class OptimizerNonConvergence(FitError):
    def __init__(self, max_iter, detail=""):
        super().__init__(f"optimizer did not converge within {max_iter} iterations {detail}".strip(),
                         max_iter=max_iter)


class IRLSNonConvergence(FitError):
    def __init__(self, max_iter):
        super().__init__(f"IRLS did not converge within {max_iter} iterations", max_iter=max_iter)


class SeparationDetected(FitError):
    def __init__(self, period, arm):
        super().__init__(f"fitted probabilities degenerate for arm z={arm} in period {period}",
                         period=period, arm=arm)


class InnerNewtonDivergence(FitError):
    def __init__(self, cluster):
        super().__init__(f"random-effect mode search failed for cluster {cluster!r}", cluster=cluster)


class LocoDegenerate(ValidationError):
    def __init__(self, cluster, period):
        super().__init__(f"dropping cluster {cluster!r} empties an arm in period {period}",
                         cluster=cluster, period=period)


class SingularContrastCovariance(FitError):
    def __init__(self, condition):
        super().__init__(f"contrast covariance is numerically singular (condition {condition:.3g})",
                         condition=condition)


class InvalidConfig(ValidationError):
    def __init__(self, msg, **context):
        super().__init__(msg, **context)
