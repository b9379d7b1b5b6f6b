class AmilError(Exception):
    pass


class ShapeError(AmilError, ValueError):
    pass


class DomainError(AmilError, ValueError):
    pass


class NumericError(AmilError, ArithmeticError):
    pass


class StateError(AmilError, RuntimeError):
    pass


class ConfigError(AmilError, ValueError):
    pass


class ParseError(AmilError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(AmilError, ValueError):
    pass


class DegenerateSampleError(AmilError, ValueError):
    pass


class TrainingDivergence(AmilError, RuntimeError):
    def __init__(self, iteration, losses):
        detail = ", ".join(f"{k}={v!r}" for k, v in losses.items())
        super().__init__(f"training diverged at iteration {iteration}: {detail}")
        self.iteration = iteration
        self.losses = dict(losses)
