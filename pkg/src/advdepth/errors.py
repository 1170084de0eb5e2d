"""Exception types shared across the package."""


class ShapeError(ValueError):
    """A primitive received tensors whose shapes violate its contract."""

    def __init__(self, message, node_id=None):
        self.node_id = node_id
        if node_id is not None:
            message = f"node {node_id}: {message}"
        super().__init__(message)


class NumericalError(ArithmeticError):
    """A non-finite value appeared in an input, loss or gradient."""


class DataFormatError(ValueError):
    """Malformed or truncated file; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
