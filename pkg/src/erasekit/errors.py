"""Exception taxonomy shared across the toolkit.

The CLI maps ConfigurationError to exit code 2 and every other
EraseKitError to exit code 3.
"""


class EraseKitError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(EraseKitError):
    """Invalid user-supplied configuration, arguments, or input files."""


class ContractError(EraseKitError):
    """A call violated an internal API contract (e.g. double positional add)."""


class BackendContractError(EraseKitError):
    """A model backend returned shapes or values that break its contract."""


class BackendLoadError(EraseKitError):
    """A backend locator could not be resolved into a working model stack."""


class TrainingDivergedError(EraseKitError):
    """Training aborted on a non-finite loss; carries the diagnostic record."""

    def __init__(self, message: str, record: dict | None = None):
        super().__init__(message)
        self.record = record or {}


class PartialReferenceSetError(EraseKitError):
    """Reference-image generation exhausted its candidate budget.

    The manifest of images accepted so far is attached so callers can keep
    the partial set.
    """

    def __init__(self, message: str, manifest: dict):
        super().__init__(message)
        self.manifest = manifest


class ToyPretrainError(EraseKitError):
    """Toy backend pretraining failed its sample-quality gate."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
