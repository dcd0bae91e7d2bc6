"""Exception hierarchy shared across the package.

Parse failures during reward scoring are caught at the reward layer and
turned into zero-reward breakdowns; they never abort a run.
"""


class CotloopError(Exception):
    """Base class for all package errors."""


class DomainError(CotloopError):
    """A mathematical precondition was violated (mismatched categories, empty group, ...)."""


class InvalidGeometry(CotloopError):
    """Box coordinates that cannot form a valid box."""


class EmptyMask(CotloopError):
    """A binary mask with no true cells cannot produce a bounding box."""


class MalformedAnswer(CotloopError):
    """Model output that does not parse into the expected annotation form."""


class MissingVariable(CotloopError):
    """A prompt template placeholder had no value supplied."""

    def __init__(self, name: str):
        super().__init__(f"missing template variable: {name}")
        self.name = name


class TemplateError(CotloopError):
    """A template declares a placeholder outside its stage's variable set."""


class BackendError(CotloopError):
    """Base class for generation-backend failures."""


class RemoteUnavailable(BackendError):
    """Remote endpoint unreachable after all retries."""


class AuthFailure(BackendError):
    """Remote endpoint rejected the credential."""


class Timeout(BackendError):
    """Remote request exceeded its deadline after all retries."""


class MockMiss(BackendError):
    """Scripted mock backend has no canned response for a prompt."""


class CorruptionInfeasible(CotloopError):
    """No zero-overlap corruption box exists for a detection sample."""


class MissingFile(CotloopError):
    """A required input file does not exist."""


class HeaderMismatch(CotloopError):
    """Dataset file header is absent or inconsistent with the requested task."""


class ValidationFailure(CotloopError):
    """One or more dataset lines failed annotation validation."""

    def __init__(self, failures):
        super().__init__(f"{len(failures)} invalid dataset line(s)")
        self.failures = list(failures)
