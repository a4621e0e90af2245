"""Exception hierarchy shared by every qxkit module."""


class QxError(Exception):
    """Base class for data and format errors (CLI exit code 2)."""


class NonFiniteError(QxError, ValueError):
    def __init__(self, index, value, name=None):
        self.index = int(index)
        self.value = float(value)
        self.name = name
        where = f"tensor {name!r}: " if name else ""
        super().__init__(f"{where}non-finite value {self.value!r} at flat index {self.index}")


class GroupSizeError(QxError, ValueError):
    def __init__(self, length, group_size):
        self.length = int(length)
        self.group_size = int(group_size)
        self.remainder = self.length % self.group_size if self.group_size else 0
        super().__init__(
            f"tensor length {length} is not divisible by group size {group_size} "
            f"(remainder {self.remainder})"
        )


class ShapeError(QxError, ValueError):
    pass


class FormatError(QxError, ValueError):
    """Malformed codec payload."""


class DegenerateHistogramError(QxError, ValueError):
    pass


class ContainerError(QxError):
    pass


class BadMagicError(ContainerError):
    def __init__(self, found):
        self.found = bytes(found)
        super().__init__(f"bad magic {self.found!r}, expected b'QXT1'")


class UnsupportedVersionError(ContainerError):
    def __init__(self, version):
        self.version = version
        super().__init__(f"unsupported container version {version}")


class TruncatedError(ContainerError):
    def __init__(self, what, expected, actual):
        self.what = what
        self.expected = int(expected)
        self.actual = int(actual)
        super().__init__(f"truncated {what}: expected {expected} bytes, got {actual}")


class PayloadLengthError(ContainerError):
    def __init__(self, name, expected, actual):
        self.name = name
        self.expected = int(expected)
        self.actual = int(actual)
        super().__init__(
            f"tensor {name!r}: payload_len {actual} does not match layout size {expected}"
        )


class TrailingDataError(ContainerError):
    pass


class InvariantError(AssertionError):
    """Internal invariant violation (CLI exit code 3)."""
