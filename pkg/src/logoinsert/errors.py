"""Exception hierarchy shared across the package."""


class LogoInsertError(Exception):
    """Base class for all package errors."""


class LoadError(LogoInsertError):
    pass


class ManifestValidationError(LogoInsertError):
    def __init__(self, message, fields=()):
        super().__init__(message)
        self.fields = list(fields)


class IntegrityError(LogoInsertError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class ConfigError(LogoInsertError):
    pass


class DomainError(LogoInsertError, ValueError):
    pass


class IncompleteScoreError(LogoInsertError):
    pass


class CriticError(LogoInsertError):
    pass


class BackendError(LogoInsertError):
    pass


class TokenizationError(BackendError):
    pass


class RegistrationError(BackendError):
    pass


class ShapeError(BackendError, ValueError):
    pass


class CapabilityError(BackendError):
    pass


class CheckpointError(BackendError):
    pass


class ContrastError(LogoInsertError):
    pass


class PlacementError(LogoInsertError, ValueError):
    pass


class ScaleError(PlacementError):
    pass


class TokenResolutionError(LogoInsertError):
    pass


class TemplateError(LogoInsertError, ValueError):
    pass


class PhaseOrderError(LogoInsertError):
    pass


class PhaseAbort(LogoInsertError):
    """Training phase stopped early; ``checkpoint`` points at the saved state, if any."""

    def __init__(self, message, checkpoint=None, diagnostics=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.diagnostics = diagnostics or {}
