"""Exception hierarchy.  Everything raised on purpose derives from BinsightError."""


class BinsightError(Exception):
    pass


class IngestionError(BinsightError, ValueError):
    """Input bytes are unusable (e.g. an empty file)."""


class DomainError(BinsightError, ValueError):
    """Argument outside the function's domain."""


class ConfigError(BinsightError, ValueError):
    pass


class ShapeError(BinsightError, ValueError):
    pass


class UsageError(BinsightError, RuntimeError):
    """API called out of order, e.g. backward without a forward cache."""


class NumericFault(BinsightError, FloatingPointError):
    """NaN or Inf reached a place where only finite values are allowed."""


class DataError(BinsightError, ValueError):
    pass


class ManifestError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class CorpusError(DataError):
    def __init__(self, failures):
        self.failures = list(failures)
        listing = "; ".join(f"{src}: {why}" for src, why in self.failures)
        super().__init__(f"{len(self.failures)} file(s) could not be encoded: {listing}")


class ModelFileError(BinsightError):
    pass


class BadMagic(ModelFileError):
    pass


class UnsupportedVersion(ModelFileError):
    pass


class TruncatedFile(ModelFileError):
    pass


class ChecksumMismatch(ModelFileError):
    pass


class CorruptFile(ModelFileError):
    """Checksum matched but the records disagree with the config block."""
