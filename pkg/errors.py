"""
Exception hierarchy shared by every RDD-MK module.

Each error carries a machine-readable ``code`` and a ``context`` dict so the
CLI can report failures as ``{code, message, context}`` JSON.
"""

from typing import Any, Dict, List, Optional


class RDDMKError(Exception):
    code = "rddmk_error"

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.context = context or {}

    def to_dict(self) -> Dict[str, Any]:
        return {"code": self.code, "message": self.message, "context": self.context}


class NotPDError(RDDMKError):
    code = "not_pd"


class NotCorrelationError(RDDMKError):
    code = "not_correlation"


class AntipodalPointError(RDDMKError):
    code = "antipodal_point"


class DegenerateMeanError(RDDMKError):
    code = "degenerate_mean"


class NoConvergenceError(RDDMKError):
    code = "no_convergence"


class OverflowGuardError(RDDMKError):
    code = "overflow_guard"


class SingularSystemError(RDDMKError):
    code = "singular_system"


class DisconnectedGraphError(RDDMKError):
    code = "disconnected_graph"


class DegenerateInputError(RDDMKError):
    code = "degenerate_input"


class PartitionInfeasibleError(RDDMKError):
    code = "partition_infeasible"


class NoPairsError(RDDMKError):
    code = "no_pairs"


class FitFailedError(RDDMKError):
    code = "fit_failed"


class AggregationFailureError(RDDMKError):
    code = "aggregation_failure"


class PreconditionViolation(RDDMKError):
    code = "precondition_violation"


class FactorizationFailureError(RDDMKError):
    code = "factorization_failure"


class DimensionMismatchError(RDDMKError):
    code = "dimension_mismatch"


class ParseError(RDDMKError):
    code = "parse_error"


class ValidationError(RDDMKError):
    """Collects every violation found while validating a config, not just the first."""

    code = "validation_error"

    def __init__(self, violations: List[str], context: Optional[Dict[str, Any]] = None):
        self.violations = list(violations)
        context = dict(context or {})
        context["violations"] = self.violations
        super().__init__("; ".join(self.violations), context)


class InvalidMatrixError(RDDMKError):
    code = "invalid_matrix"


class RowCountMismatchError(RDDMKError):
    code = "row_count_mismatch"


class OutputWriteError(RDDMKError):
    code = "io_error"


class InternalError(RDDMKError):
    """Wraps an unexpected exception so the CLI still reports it as JSON."""

    code = "internal_error"
