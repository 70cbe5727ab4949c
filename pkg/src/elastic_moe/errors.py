class ValidationError(ValueError):
    """Raised when an input violates a documented contract.

    The CLI maps this to exit code 1; file-system problems surface as
    ``OSError`` and map to exit code 2.
    """
