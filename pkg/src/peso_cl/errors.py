"""Exception types raised across the package."""


class PesoError(Exception):
    pass


class PreconditionError(PesoError, ValueError):
    pass


class NumericError(PesoError, ArithmeticError):
    pass


class FactorizationError(NumericError):
    def __init__(self, pivot, value):
        super().__init__(f"matrix is not positive definite: pivot {pivot} = {value!r}")
        self.pivot = pivot
        self.value = value


class SingularityError(NumericError):
    pass


class ConvergenceError(NumericError):
    pass


class DivergenceError(NumericError):
    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss!r})")
        self.epoch = epoch
        self.loss = loss


class NormalizationError(PesoError, ValueError):
    pass


class ParseError(PesoError, ValueError):
    def __init__(self, line, msg):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class SplitError(PesoError, ValueError):
    pass


class CheckpointError(PesoError):
    pass


class ConfigError(PesoError, ValueError):
    pass


class StageError(PesoError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause
