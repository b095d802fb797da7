"""
Exception hierarchy shared by every app in the lab.
"""


class DarkKnowledgeError(Exception):
    """Base class for all errors raised by the lab."""


class ShapeError(DarkKnowledgeError, ValueError):
    """Array shapes do not agree with a network spec or grid geometry."""


class NonFiniteParamsError(ShapeError):
    """Parameter values hold NaN or infinity."""


class PreconditionError(DarkKnowledgeError, ValueError):
    """An argument violates an operation's precondition."""


class HeadMismatchError(DarkKnowledgeError):
    """Teacher and student heads do not form a supported distillation task."""


class DivergedChainError(DarkKnowledgeError):
    def __init__(self, iteration, which="teacher"):
        self.iteration = iteration
        self.which = which
        super().__init__(f"{which} parameters became non-finite at iteration {iteration}")


class DataFormatError(DarkKnowledgeError):
    def __init__(self, path, reason, line=None):
        self.path = str(path)
        self.line = line
        self.reason = reason
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {reason}")


class ConfigError(DarkKnowledgeError):
    def __init__(self, field, reason):
        self.field = field
        self.reason = reason
        super().__init__(f"{field}: {reason}")
