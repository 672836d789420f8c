"""Exception types shared across the package.

Container readers raise FormatError subclasses with the byte offset in the
message so CLI users can locate corruption in files.
"""


class MalimageError(Exception):
    """Base class for all package errors."""


class UsageError(MalimageError):
    """Bad arguments or option combinations (CLI exit code 1)."""


class DataError(MalimageError):
    """Invalid data or file contents (CLI exit code 2)."""


class FormatError(DataError):
    """Malformed container file; message names the byte offset."""


class BadMagic(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class DimMismatch(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class EmptyInput(DataError):
    pass


class DuplicatePath(DataError):
    pass


class EmptyCorpus(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class NotBinary(DataError):
    pass


class SingleClass(DataError):
    pass


class InvalidLabels(DataError):
    pass


class KTooLarge(DataError):
    pass


class MissingEmbedding(DataError):
    def __init__(self, missing_ids):
        self.missing_ids = list(missing_ids)
        super().__init__(f"no embedding for {len(self.missing_ids)} ids: "
                         + ", ".join(self.missing_ids[:5])
                         + ("..." if len(self.missing_ids) > 5 else ""))


class Diverged(MalimageError):
    """Training loss became non-finite (CLI exit code 3)."""
