"""
Exception hierarchy with process exit codes
"""


class Mp2Error(Exception):
    """Base error for the modular prompt toolkit"""

    exit_code = 1

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class ConfigError(Mp2Error):
    """Invalid configuration or command-line combination"""

    exit_code = 2


class TaskError(Mp2Error):
    """Task construction or data split failure"""

    exit_code = 2


class NumericFault(Mp2Error):
    """Non-finite value or numerically singular computation"""

    exit_code = 3


class ShapeError(NumericFault):
    """Tensor shapes do not conform"""


class TapeError(NumericFault):
    """Misuse of a gradient tape"""


class OptimizerError(NumericFault):
    """Optimizer misuse: fitness mismatch, empty budget, bad bounds"""


class CheckpointError(Mp2Error):
    """Checkpoint read or write failure"""

    exit_code = 4


class EmptySkillSetWarning(UserWarning):
    """Every gate of a router binarized to zero"""


class FrozenTensorError(NumericFault):
    """A tensor that must stay frozen was modified"""
