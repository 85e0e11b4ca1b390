"""Exception hierarchy shared across the package."""


class CapsError(Exception):
    """Base class for every error raised by capsadapter."""


# feature store
class ZeroNormRow(CapsError, ValueError):
    def __init__(self, row: int):
        super().__init__(f"row {row} has (near) zero norm")
        self.row = row


class FormatError(CapsError, ValueError):
    pass


class OutOfRangeClass(CapsError, ValueError):
    pass


class NonContiguousClasses(CapsError, ValueError):
    pass


class EmptyClassPromptSet(CapsError, ValueError):
    def __init__(self, k: int):
        super().__init__(f"class {k} has no prompt embeddings")
        self.k = k


class DimMismatch(CapsError, ValueError):
    pass


# kernels
class NotNormalized(CapsError, ValueError):
    pass


class ShapeMismatch(CapsError, ValueError):
    pass


class DeltaOutOfRange(CapsError, ValueError):
    pass


class NotStochastic(CapsError, ValueError):
    pass


class EmptyInput(CapsError, ValueError):
    pass


# search
class InvalidRange(CapsError, ValueError):
    pass


class EmptyGrid(CapsError, ValueError):
    pass


# evaluator
class LengthMismatch(CapsError, ValueError):
    pass


class NoCommonClasses(CapsError, ValueError):
    pass


class EmptyReport(CapsError, ValueError):
    pass


# support builder
class EmptyClass(CapsError, ValueError):
    pass


class EmptyClassname(CapsError, ValueError):
    pass


class NoPrompts(CapsError, ValueError):
    pass


class InvalidCount(CapsError, ValueError):
    pass


# model clients
class ClientError(CapsError):
    pass


class Timeout(ClientError):
    pass


class BadResponse(ClientError):
    pass


class Exhausted(ClientError):
    pass


class DimZero(ClientError):
    pass


class UsageError(CapsError):
    pass
