"""Error type shared by every module: a machine-readable code plus details."""

INVALID_PARAMS = "invalid_params"
DIMENSION_MISMATCH = "dimension_mismatch"
NOT_STOCHASTIC = "not_stochastic"
RANK_DEFICIENT = "rank_deficient"
INFEASIBLE = "infeasible"
DEGENERATE = "degenerate"
MARGIN_VIOLATION = "margin_violation"
ZERO_DENSITY = "zero_density"
DIVERGED = "diverged"
INVALID_CONFIG = "invalid_config"
UNKNOWN_SCENARIO = "unknown_scenario"
NUMERICAL_FAULT = "numerical_fault"
INCOMPATIBLE_KERNEL = "incompatible_kernel"
INTERNAL_ERROR = "internal_error"


class LatentActError(Exception):
    """Contract violation raised by an operation.

    `code` is one of the constants above; `details` carries the numbers the
    caller needs to act on the failure (offending edge, effective rank,
    max column-sum deviation, ...).
    """

    def __init__(self, code: str, message: str, **details):
        super().__init__(message)
        self.code = code
        self.message = message
        self.details = details

    def to_dict(self) -> dict:
        return {"error": self.code, "message": self.message, "details": self.details}

    def __str__(self) -> str:
        return f"[{self.code}] {self.message}"
