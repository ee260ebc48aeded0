"""Exception hierarchy.

ConfigError subclasses map to CLI exit code 2, NumericalError subclasses to exit code 3.
"""


class SteeringError(Exception):
    pass


class ConfigError(SteeringError):
    pass


class DensityFileError(ConfigError):
    def __init__(self, path, line: int, detail: str):
        self.path = str(path)
        self.line = line
        self.detail = detail
        super().__init__(f"{self.path}:{line}: {detail}")


class NumericalError(SteeringError):
    pass


class NegativeDensityError(NumericalError):
    pass


class ZeroMassError(NumericalError):
    pass


class NonFiniteError(NumericalError):
    pass


class SingularFrameError(NumericalError):
    pass


class BlowUpError(NumericalError):
    pass


class OrientationLossError(NumericalError):
    pass


class ExcessiveMassDriftError(NumericalError):
    def __init__(self, mass_drift: float):
        self.mass_drift = mass_drift
        super().__init__(f"mass drift {mass_drift:.6g} outside tolerance")


class GridMismatchError(NumericalError):
    pass


class SizeExceededError(NumericalError):
    pass


class WeightMismatchError(NumericalError):
    pass


class NonConvergenceError(NumericalError):
    def __init__(self, message: str, result=None):
        self.result = result
        super().__init__(message)


class NonPositive1DError(NumericalError):
    pass


class EmptyRowError(NumericalError):
    pass


class IncompatibleSourceError(NumericalError):
    pass


class FoldOverError(NumericalError):
    pass


class NewtonDivergenceError(NumericalError):
    pass


class NotNearIdentityError(NumericalError):
    pass


class NonMonotoneMapError(NumericalError):
    pass


class NonMonotoneShearError(NumericalError):
    pass


class SynthesisError(NumericalError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
