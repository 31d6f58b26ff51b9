"""Exception hierarchy shared across the runtime."""


class IcflowError(Exception):
    """Base class for all runtime errors."""


class ConfigurationError(IcflowError):
    """Invalid configuration: bad worker counts, shard counts, enum values."""


class ProtocolError(IcflowError):
    """Violation of a store or fabric protocol precondition."""


class SchedulingConflictError(IcflowError):
    """Two workers were assigned overlapping parameter indices in one round."""


class NonFiniteObjectiveError(IcflowError):
    """The objective became NaN/inf during a run."""

    def __init__(self, iteration: int, value: float):
        super().__init__(
            f"objective became non-finite ({value!r}) at iteration {iteration}"
        )
        self.iteration = iteration
        self.value = value


class ShapeMismatchError(IcflowError):
    """Model state shape does not match the program's expectation."""


class StateCorruptionError(IcflowError):
    """Internal counts or invariant state went inconsistent (e.g. negative count)."""


class DecodeError(IcflowError):
    """Malformed wire bytes."""

    def __init__(self, offset: int, reason: str):
        super().__init__(f"decode error at offset {offset}: {reason}")
        self.offset = offset


class TraceParseError(IcflowError):
    """Malformed trace file."""

    def __init__(self, line_number: int, reason: str):
        super().__init__(f"trace parse error at line {line_number}: {reason}")
        self.line_number = line_number
