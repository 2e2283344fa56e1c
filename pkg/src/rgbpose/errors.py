"""Exception types shared across the package.

The CLI maps these onto exit codes: ``UsageError`` -> 1, ``ConfigError`` -> 2,
anything else -> 3.
"""


class RgbPoseError(Exception):
    """Base class for all package errors."""


class UsageError(RgbPoseError):
    pass


class ConfigError(RgbPoseError, ValueError):
    pass


class DimensionError(RgbPoseError, ValueError):
    pass


class DegenerateError(RgbPoseError, ValueError):
    """Input geometry is too degenerate for the requested computation."""


class GenerationError(RgbPoseError, RuntimeError):
    pass


class EmptyInstanceError(RgbPoseError, ValueError):
    """A sample has no usable foreground tokens."""


class BehindCameraError(RgbPoseError, ValueError):
    def __init__(self, indices):
        self.indices = list(int(i) for i in indices)
        shown = self.indices[:10]
        more = "" if len(self.indices) <= 10 else f" (+{len(self.indices) - 10} more)"
        super().__init__(f"points behind the camera at indices {shown}{more}")
