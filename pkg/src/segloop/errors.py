"""Exception hierarchy shared across the package."""


class SegloopError(Exception):
    """Base class for every domain error raised by segloop."""


# --- dataset files and partitioning ---

class ParseError(SegloopError):
    """The file is not well-formed text/JSON."""


class SchemaError(SegloopError):
    """A required field is missing or an id reference dangles."""


class GeometryError(SegloopError):
    """Mask dimensions disagree with the referenced image."""


class PartitionError(SegloopError):
    """Invalid partition assignment (overlap or unknown image id)."""


class StorageError(SegloopError):
    """Reading or writing an artifact file failed."""


# --- mask geometry ---

class LengthError(SegloopError):
    """Run-length counts do not sum to the mask size."""


class DegenerateError(SegloopError):
    """Polygon has fewer than three vertices or zero area."""


class DimensionError(SegloopError):
    """Masks have incompatible dimensions."""


class EmptyError(SegloopError):
    """Operation undefined on empty masks."""


class MixedImageError(SegloopError):
    """Detections passed to NMS reference different images."""


# --- evaluation ---

class UnknownImageError(SegloopError):
    """A detection references an image absent from the ground truth."""


class NoGroundTruthError(SegloopError):
    """Metrics requested with zero ground-truth instances."""


class EmptyTestSetError(SegloopError):
    """The testing partition contains no images."""


# --- detectors ---

class SpawnError(SegloopError):
    """External detector process failed to start."""


class VersionError(SegloopError):
    """State blob version or digest mismatch."""


class EmptyJobError(SegloopError):
    """Training job has no images or no work to do."""


class ProtocolError(SegloopError):
    """External detector violated the wire protocol."""


class NotTrainedError(SegloopError):
    """Inference requested before any training."""


class SerializationError(SegloopError):
    """Detector state could not be serialized or parsed."""


class HandleClosedError(SegloopError):
    """Operation on a detector handle after close()."""


# --- synthetic scenes ---

class PackingError(SegloopError):
    """Requested instances cannot be placed on the canvas."""


# --- self-learning loop ---

class NoBootstrapError(SegloopError):
    """Bootstrapping partition has no human annotations."""


class MissingCheckpointError(SegloopError):
    """Requested iteration checkpoint does not exist."""


class MissingMetricsError(SegloopError):
    """metrics.csv is absent or has no data rows."""


class EmptyGridError(SegloopError):
    """Grid search invoked with an empty axis."""


class ConfigError(SegloopError):
    """Run configuration value is out of range or unparseable."""
