"""Exception hierarchy.

Every error class carries the process exit code the command line front end
reports for it, so scripts driving ``udocker`` from batch systems can tell
failure classes apart.
"""


class UdockerError(Exception):
    exit_code = 1


class UsageError(UdockerError):
    exit_code = 1


class NotFoundError(UdockerError):
    exit_code = 2


class ImageNotFoundError(NotFoundError):
    pass


class IncompleteImageError(NotFoundError):
    pass


class IntegrityError(UdockerError):
    exit_code = 3


class FormatError(UdockerError):
    """A file (tar, ELF, cache, manifest, JSON) could not be decoded."""

    exit_code = 3


class RejectedEntryError(FormatError):
    def __init__(self, layer, path, reason):
        super().__init__("layer %s: rejected entry %r: %s" % (layer, path, reason))
        self.layer = layer
        self.path = path
        self.reason = reason


class NotElfError(FormatError):
    pass


class EngineFault(UdockerError):
    exit_code = 4


class ModeUnavailableError(UdockerError):
    exit_code = 5

    def __init__(self, message, fallback="P1"):
        super().__init__("%s (fallback: %s)" % (message, fallback))
        self.fallback = fallback


class DelegationUnavailableError(ModeUnavailableError):
    pass


class RepositoryError(UdockerError):
    exit_code = 6


class LayoutError(RepositoryError):
    pass


class ConflictError(RepositoryError):
    pass


class ProtectedError(RepositoryError):
    pass


class RegistryError(UdockerError):
    exit_code = 7


class ProtocolError(RegistryError):
    pass


class AuthError(RegistryError):
    pass


class UnsupportedManifestError(RegistryError):
    pass


class SpecError(UsageError):
    """An execution request that cannot be turned into a valid launch."""


class NoCommandError(SpecError):
    pass


class UnsupportedError(UdockerError):
    exit_code = 1


class DegenerateSampleError(UdockerError):
    exit_code = 1


class UndefinedRatioError(UdockerError):
    exit_code = 1
