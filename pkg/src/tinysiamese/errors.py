"""Exceptions shared by the on-disk formats."""


class FormatError(ValueError):
    """A file could not be parsed."""


class BadMagicError(FormatError):
    pass


class BadVersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class DimMismatchError(FormatError):
    pass


class EmptyFileError(FormatError):
    pass
