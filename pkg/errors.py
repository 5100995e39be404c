"""
errors.py
Error taxonomy shared by every module. Each error carries the machine-readable
code and exit status the command line reports.
"""


class RegistrationError(Exception):
    """Base class for every failure the engine reports."""
    code = "error"
    exit_code = 3

    def to_dict(self) -> dict:
        return {"error": {"code": self.code, "message": str(self)}}


class ShapeMismatchError(RegistrationError):
    code = "shape_mismatch"


class InvalidInputError(RegistrationError):
    code = "invalid_input"


class FormatError(RegistrationError):
    """Malformed payload or sidecar on disk."""
    code = "format_error"


class LandmarkError(RegistrationError):
    code = "landmark_error"


class DivergenceError(RegistrationError):
    """Non-finite loss or gradient during optimization; carries the loss trace so far."""
    code = "divergence"
    exit_code = 4

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class UsageError(RegistrationError):
    """Bad command-line flags."""
    code = "usage_error"
    exit_code = 2


class StorageError(RegistrationError):
    """A file could not be read or written."""
    code = "io_error"
