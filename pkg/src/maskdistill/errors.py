"""Exception hierarchy shared by every module."""


class MaskDistillError(Exception):
    """Base class for all package errors."""


class ConfigError(MaskDistillError, ValueError):
    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class DomainError(MaskDistillError, ValueError):
    """An argument lies outside the domain of the operation."""


class StructuralError(MaskDistillError, ValueError):
    """Shapes, names or group alignment do not match."""


class SequenceLengthError(MaskDistillError, ValueError):
    pass


class VocabularyError(MaskDistillError, ValueError):
    pass


class NumericError(MaskDistillError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class MissingArtifactError(MaskDistillError, FileNotFoundError):
    pass
