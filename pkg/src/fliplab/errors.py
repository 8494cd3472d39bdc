"""Exception and warning types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, shape mismatch or impossible request."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared in a loss or parameter update."""


class PruningError(ValueError):
    """A prune request that cannot be honoured (e.g. would remove every weight)."""


class IdxParseError(ValueError):
    """Malformed IDX file.  ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, path: str = "", offset: int = 0):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte {offset}: {message}" if path else f"byte {offset}: {message}")


class LayerCollapseWarning(UserWarning):
    """Every weight of at least one layer has been pruned."""

    def __init__(self, layers):
        self.layers = list(layers)
        super().__init__(f"layer collapse: layers {self.layers} have no remaining weights")
