"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI returns for it.
"""

from typing import Optional


class VioError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(VioError):
    exit_code = 2


class InputFormatError(VioError):
    """A record in an input file could not be parsed or violates its bounds."""

    exit_code = 3

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        where = ''
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class InitializationError(VioError):
    exit_code = 4


class MotionDetectedError(InitializationError):
    """IMU samples are too noisy for the static-initialization window."""


class VisionInitTimeout(InitializationError):
    """No usable stereo map could be bootstrapped before the timeout."""


class MapNotReadyError(InitializationError):
    """Too few active pixels for a stereo bootstrap of the map."""


class TrackingError(VioError):
    exit_code = 5


class InsufficientMapError(TrackingError):
    pass


class TrackingLostError(TrackingError):
    pass


class EstimationError(VioError):
    """Numerical failure in the filter or the integrator."""

    exit_code = 6


class EvaluationError(VioError):
    exit_code = 7


class SimulationError(VioError):
    exit_code = 8
