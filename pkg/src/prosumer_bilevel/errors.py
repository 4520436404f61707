"""Exception hierarchy."""


class BilevelError(Exception):
    pass


class DimensionMismatch(BilevelError, ValueError):
    pass


class InvalidProfile(BilevelError, ValueError):
    def __init__(self, field: str, message: str, prosumer: int | None = None):
        self.field = field
        self.prosumer = prosumer
        where = f"prosumer {prosumer}: " if prosumer is not None else ""
        super().__init__(f"{where}{field}: {message}")


class InfeasibleBlock(BilevelError):
    def __init__(self, block: int, lo: float, target: float, hi: float):
        self.block = block
        super().__init__(
            f"block {block}: need sum(ell)={lo:.6g} <= -d={target:.6g} <= sum(u)={hi:.6g}"
        )


class EqualityViolated(BilevelError, ValueError):
    pass


class NotPositiveDefinite(BilevelError, ValueError):
    pass


class RankDeficient(BilevelError, ValueError):
    pass


class NotSymmetric(BilevelError, ValueError):
    pass


class BisectionStalled(BilevelError):
    pass


class MaxIterations(BilevelError):
    """Iteration cap hit; ``best`` carries the last iterate if one exists."""

    def __init__(self, message: str, best=None):
        self.best = best
        super().__init__(message)


class Infeasible(BilevelError):
    pass


class Unbounded(BilevelError):
    pass


class HypothesisViolated(BilevelError):
    def __init__(self, failed: list[str], report=None):
        self.failed = failed
        self.report = report
        super().__init__("hypotheses violated: " + ", ".join(failed))


class DimensionTooLarge(BilevelError, ValueError):
    pass
