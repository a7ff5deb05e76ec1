"""
Exception hierarchy shared by every solver module
"""


class SkembedError(Exception):
    """Base class for all solver-suite errors"""


class SchemaError(SkembedError, ValueError):
    """Malformed input file; the message names the offending field"""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ArbitrageError(SkembedError, ValueError):
    """Market data outside the admissible price set"""

    def __init__(self, message, verdict=None):
        self.verdict = verdict
        super().__init__(message)


class SupportError(SkembedError, ValueError):
    """Measure support outside a required window or lattice range"""


class QuantizationError(SupportError):
    pass


class InfeasibleError(SkembedError, RuntimeError):
    pass


class UnboundedError(SkembedError, RuntimeError):
    pass


class NumericBreakdownError(SkembedError, RuntimeError):
    """Pivot too small to divide by safely"""

    def __init__(self, row, col, pivot):
        self.row = row
        self.col = col
        self.pivot = pivot
        super().__init__(f"pivot {pivot:.3e} at row {row}, column {col}")


class BudgetExceededError(SkembedError, RuntimeError):
    """A state, path, pair or LP size budget was exceeded"""

    def __init__(self, what, size, budget):
        self.what = what
        self.size = size
        self.budget = budget
        super().__init__(f"{what} budget exceeded: {size} > {budget}")


class NotConvergedError(SkembedError, RuntimeError):
    pass
