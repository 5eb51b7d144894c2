"""
errors.py: Exception hierarchy shared by every qmamba module.
"""


class QMambaError(Exception):
    """Base class for all toolkit errors."""


class TensorError(QMambaError):
    pass


class QuantError(QMambaError):
    pass


class CalibrationError(QMambaError):
    pass


class EngineError(QMambaError):
    pass


class ReconstructionError(QMambaError):
    pass


class SyntheticError(QMambaError):
    pass


class TrainingError(QMambaError):
    pass


class ConfigError(QMambaError):
    pass
