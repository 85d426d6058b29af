"""Exception hierarchy shared by all zoneforge modules."""


class ZoneforgeError(Exception):
    """Base class for every domain error raised by zoneforge."""


class FormatError(ZoneforgeError):
    """On-disk data does not match its header or the file format."""


class InvariantError(ZoneforgeError):
    """A value object was constructed in violation of its invariants."""


class ComboError(ZoneforgeError):
    """An input-map combination is not one of the 14 canonical combinations."""


class ConfigError(ZoneforgeError):
    """A configuration object or config file is invalid."""


class ShapeError(ZoneforgeError, ValueError):
    """Array shapes disagree."""


class DataError(ZoneforgeError):
    """A case lacks data required by the requested operation."""


class TrainError(ZoneforgeError):
    """Training diverged."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class EmptyMaskError(ZoneforgeError):
    """A distance metric was requested on an empty mask."""


class StatsError(ZoneforgeError):
    """Statistics were requested on degenerate samples."""
