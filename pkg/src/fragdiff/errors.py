"""Package-wide error type carrying a stable machine-readable code."""


class FragdiffError(Exception):
    """Raised for all contract violations; `code` is a stable short slug."""

    def __init__(self, code: str, message: str = ""):
        self.code = code
        super().__init__(f"{code}: {message}" if message else code)
