"""Exception types shared across the package."""


class NumericalError(RuntimeError):
    """A linear-algebra step lost positive-definiteness or produced non-finite values."""


class EmptyTreeError(RuntimeError):
    """A query was issued against a tree with no nodes."""
