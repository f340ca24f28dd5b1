"""Exception hierarchy shared by all adscope modules."""


class AdscopeError(Exception):
    """Base class for every error raised by adscope."""


class ConfigError(AdscopeError):
    """Bad user-supplied input: manifests, registries, rulesets, flags."""


# --- DEX parsing -----------------------------------------------------------

class DexError(AdscopeError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at offset 0x{offset:x})"
        super().__init__(message)


class MalformedHeader(DexError):
    pass


class IndexOutOfRange(DexError):
    pass


class TruncatedSection(DexError):
    pass


class InvalidDescriptor(DexError):
    pass


class UnknownOpcode(DexError):
    """Raised while walking a single method; callers turn it into a diagnostic."""


# --- containers / ingest ---------------------------------------------------

class ContainerError(AdscopeError):
    pass


class NoDexFound(ContainerError):
    pass


class ArchiveCorrupt(ContainerError):
    pass


class ManifestSyntax(ConfigError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)


class DuplicateAppId(ConfigError):
    pass


class RecordSyntax(ConfigError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


# --- library identification ------------------------------------------------

class RegistrySyntax(RecordSyntax):
    pass


class AmbiguousRegistry(ConfigError):
    pass


class EmptyPackage(AdscopeError):
    pass


# --- classification --------------------------------------------------------

class RulesetSyntax(RecordSyntax):
    pass


class ConflictingOverrides(AdscopeError):
    pass


# --- reporting / cli -------------------------------------------------------

class DegenerateInput(AdscopeError):
    pass


class UnknownLibrary(ConfigError):
    pass


class MissingCache(AdscopeError):
    pass


class MissingFixture(AdscopeError):
    pass
