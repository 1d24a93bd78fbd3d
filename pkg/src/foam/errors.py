class FoamError(Exception):
    exit_code = 1


class ConfigError(FoamError):
    exit_code = 2


class DataError(FoamError):
    exit_code = 3


class NumericalError(FoamError, ArithmeticError):
    """NaN/Inf in a forward value, loss, or gradient; also training divergence."""

    exit_code = 4


class ShapeError(FoamError, ValueError):
    def __init__(self, op: str, a, b, detail: str = ""):
        self.op = op
        self.dims = (tuple(a), tuple(b))
        msg = f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
