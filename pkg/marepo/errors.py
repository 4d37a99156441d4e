"""Exception hierarchy. The CLI maps DataError to exit code 2 and NumericalError to 3."""


class MarepoError(Exception):
    exit_code = 3


class DataError(MarepoError):
    exit_code = 2


class NumericalError(MarepoError):
    exit_code = 3


# data / io

class BadMagic(DataError):
    pass


class TruncatedFile(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class NotARotation(DataError):
    pass


class DatasetError(DataError):
    pass


class IoError(DatasetError):
    pass


class ConfigError(DataError):
    pass


# numerical

class ShapeMismatch(NumericalError, ValueError):
    pass


class DegenerateAxes(NumericalError):
    pass


class DegenerateMatrix(NumericalError):
    pass


class BehindCamera(NumericalError):
    pass


class EmptySequence(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    pass


class UnviewableScene(NumericalError):
    pass


class DegenerateConfiguration(NumericalError):
    pass


class TooFewPoints(NumericalError):
    pass


class SingularNormalEquations(NumericalError):
    pass


class NoConsensus(NumericalError):
    pass
