"""Exception hierarchy shared by every namecraft module."""


class NamecraftError(Exception):
    """Base class for all domain errors raised by namecraft."""


class EmptyNameError(NamecraftError):
    def __init__(self, raw, row=None):
        self.raw = raw
        self.row = row
        where = f" (row {row})" if row is not None else ""
        super().__init__(f"no alphabetic characters in {raw!r}{where}")


class SchemaError(NamecraftError):
    pass


class LabelError(NamecraftError):
    def __init__(self, label, row=None):
        self.label = label
        self.row = row
        where = f" (row {row})" if row is not None else ""
        super().__init__(f"unknown class label {label!r}{where}")


class RatioError(NamecraftError):
    pass


class EmptyClassError(NamecraftError):
    pass


class BadProfileError(NamecraftError):
    pass


class EmptyCorpusError(NamecraftError):
    pass


class NotConvergedError(NamecraftError):
    pass


class DimensionMismatchError(NamecraftError):
    pass


class TooLongError(NamecraftError):
    pass


class UnknownCharError(NamecraftError):
    pass


class ShapeMismatchError(NamecraftError):
    pass


class DivergedError(NamecraftError):
    pass


class EmptyDatasetError(NamecraftError):
    pass


class NoMatchError(NamecraftError):
    pass


class ModelMismatchError(NamecraftError):
    pass


class LengthMismatchError(NamecraftError):
    pass


class ModelFormatError(NamecraftError):
    """Raised for unreadable model files or format-version mismatches."""
