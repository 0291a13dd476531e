from typing import List, Optional


class UldpError(Exception):
    """Base class for every error raised by uldpfl."""


class DomainError(UldpError, ValueError):
    """Raised when a numeric argument is outside the domain of an operation."""
    def __init__(self, name: str, value, requirement: str):
        self.name = name
        self.value = value
        self.requirement = requirement
        super().__init__(f"{name}={value!r} is invalid, expected {requirement}")


class GridMismatchError(UldpError, ValueError):
    def __init__(self, expected, found):
        self.expected = list(expected)
        self.found = list(found)
        super().__init__(
            f"RDP curves must share one order grid "
            f"(got {len(self.expected)} and {len(self.found)} orders that differ)"
        )


class EmptyConvertibleGridError(UldpError):
    """Group conversion left no order satisfying alpha >= 2^(c+1)."""
    def __init__(self, exponent: int, max_order: float):
        self.exponent = exponent
        self.max_order = max_order
        super().__init__(
            f"No order satisfies alpha >= {2 ** (exponent + 1)} "
            f"(largest order on the grid: {max_order})"
        )


class ConvergenceError(UldpError):
    def __init__(self, iterations: int, achieved_delta: float, target_delta: float):
        self.iterations = iterations
        self.achieved_delta = achieved_delta
        self.target_delta = target_delta
        super().__init__(
            f"Search did not converge after {iterations} iterations "
            f"(delta {achieved_delta:.3e} vs target {target_delta:.3e})"
        )


class DimensionMismatchError(UldpError, ValueError):
    def __init__(self, expected: int, found: int, what: str = 'features'):
        self.expected = expected
        self.found = found
        super().__init__(f"Expected {expected} {what}, found {found}")


class InfeasibleAllocationError(UldpError, ValueError):
    def __init__(self, required: int, available: int):
        self.required = required
        self.available = available
        super().__init__(
            f"Allocation floor needs {required} records but only {available} exist"
        )


class NotInvertibleError(UldpError, ArithmeticError):
    def __init__(self, value: int, users: Optional[List[int]] = None):
        self.value = value
        self.users = users or []
        who = f' for users {self.users}' if self.users else ''
        super().__init__(f"Value has no inverse modulo n{who}")


class EncodingOverflowError(UldpError, OverflowError):
    def __init__(self, value: float, precision: float):
        self.value = value
        self.precision = precision
        super().__init__(
            f"{value!r} cannot be encoded at precision {precision!r} inside the field"
        )


class PreflightError(UldpError):
    """A correctness condition of the private weighting protocol is violated."""
    def __init__(self, report):
        self.report = report
        super().__init__(f"Correctness condition ({report.condition}) violated: {report.detail}")


class KeyGenerationError(UldpError):
    def __init__(self, attempts: int):
        self.attempts = attempts
        super().__init__(f"Unable to generate a valid keypair after {attempts} attempts")


class ConfigError(UldpError, ValueError):
    """Collects every validation failure of a config before anything runs."""
    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__('Invalid configuration:\n  - ' + '\n  - '.join(self.problems))


class ExperimentTerminationFailure(UldpError):
    def __init__(self, running_jobs):
        super().__init__(f'Unable to terminate active jobs: {running_jobs}')
