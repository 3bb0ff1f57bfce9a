"""Exception types shared across the package."""


class NashOTError(Exception):
    pass


class StructureError(NashOTError, ValueError):
    """Inputs that do not fit together (box mismatch, wrong shapes, duplicate points)."""


class MassMismatchError(StructureError):
    pass


class EmptyCellError(NashOTError):
    def __init__(self, player, message=None):
        self.player = player
        super().__init__(message or f"player {player} owns no grid cell")


class ConvergenceError(NashOTError):
    """Raised when an iterative solver runs out of iterations.

    ``best`` holds the best iterate found and ``residual`` its residual, so a
    caller can still inspect or reuse the partial result.
    """

    def __init__(self, message, best=None, residual=float("nan")):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.best = best
        self.residual = residual


class ConvexityError(NashOTError, ValueError):
    pass


class RangeError(NashOTError, ValueError):
    """Gradient of a potential leaves the target box."""
