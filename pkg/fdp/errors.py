class FdpError(Exception):
    '''
    Base class of every error raised on purpose by this package.
    '''


class EmptyVolumeError(FdpError, ValueError):
    pass


class VolumeFormatError(FdpError, ValueError):
    pass


class BadMagicError(VolumeFormatError):
    pass


class UnsupportedVersionError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class DimOverflowError(VolumeFormatError):
    pass


class PixelRangeError(FdpError, ValueError):
    pass


class FilterThresholdError(FdpError, ValueError):
    pass


class GeometryMismatchError(FdpError, ValueError):
    pass


class DegenerateDataError(FdpError, ValueError):
    pass


class RankError(FdpError, ValueError):
    pass


class DegenerateLesionError(FdpError, ValueError):
    pass


class LesionPlacementError(FdpError, ValueError):
    pass


class EmptyLesionsError(FdpError, ValueError):
    pass


class UndefinedMetricError(FdpError, ValueError):
    pass


class DuplicatePointError(FdpError, ValueError):
    pass


class ConfigError(FdpError, ValueError):
    pass


class ArtifactError(FdpError, ValueError):
    pass
