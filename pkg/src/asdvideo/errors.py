"""Exception hierarchy.

Every error carries the CLI exit code it maps to, so the command layer can
translate failures without a lookup table.
"""


class AsdVideoError(Exception):
    exit_code = 1


class ConfigError(AsdVideoError, ValueError):
    exit_code = 2


class DataError(AsdVideoError):
    exit_code = 3


# --- dataset / manifest -------------------------------------------------------


class MissingFile(DataError, FileNotFoundError):
    pass


class IoFailure(DataError, OSError):
    pass


class SchemaViolation(DataError, ValueError):
    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class DuplicateVideoId(DataError, ValueError):
    def __init__(self, video_id, line=None):
        self.video_id = video_id
        self.line = line
        super().__init__(f"duplicate video_id {video_id!r}" + (f" at line {line}" if line else ""))


class MissingSidecar(MissingFile):
    pass


class FrameCoverageGap(DataError, ValueError):
    def __init__(self, index):
        self.index = index
        super().__init__(f"sidecar has no annotation for frame index {index}")


class MalformedAnnotation(DataError, ValueError):
    pass


class InvalidSyntheticSpec(ConfigError):
    pass


# --- preprocessing -------------------------------------------------------------


class AllFramesRejected(AsdVideoError, ValueError):
    exit_code = 4


class DegenerateBox(AsdVideoError, ValueError):
    pass


class DegenerateConfiguration(AsdVideoError, ValueError):
    pass


# --- sampling ------------------------------------------------------------------


class VideoTooShort(AsdVideoError, ValueError):
    exit_code = 7

    def __init__(self, available, needed, video_id=None):
        self.available = available
        self.needed = needed
        self.video_id = video_id
        who = f"video {video_id!r}: " if video_id else ""
        super().__init__(f"{who}{available} usable frames, slice needs {needed}")


class MissingFrameFile(MissingFile):
    pass


class UnknownVideo(AsdVideoError, KeyError):
    exit_code = 7

    def __str__(self):
        return Exception.__str__(self)


# --- model ---------------------------------------------------------------------


class ShapeMismatch(AsdVideoError, ValueError):
    pass


class SequenceTooLong(AsdVideoError, ValueError):
    pass


class CheckpointMismatch(AsdVideoError):
    exit_code = 6


# --- training / evaluation -----------------------------------------------------


class TooFewSubjects(ConfigError):
    pass


class OutOfRangeStep(AsdVideoError, ValueError):
    pass


class InvalidLabel(AsdVideoError, ValueError):
    pass


class NonFiniteLoss(AsdVideoError, FloatingPointError):
    exit_code = 5


class EmptyPredictionList(AsdVideoError, ValueError):
    pass


class OutOfRangeProbability(AsdVideoError, ValueError):
    pass


class EmptyRecords(AsdVideoError, ValueError):
    pass
