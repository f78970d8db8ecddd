"""Exception hierarchy shared by all zeropose modules."""


class ZeroposeError(Exception):
    """Base class for every error raised by this package."""


# --- geometry ---------------------------------------------------------------

class NonPositiveDepth(ZeroposeError):
    """A point to be projected has camera-frame depth z <= 0."""


class DegenerateView(ZeroposeError):
    """look-at construction with coincident eye and target."""


# --- mesh -------------------------------------------------------------------

class ParseError(ZeroposeError):
    """Malformed mesh file (bad header, wrong counts, truncated data)."""


class UnsupportedFormat(ZeroposeError):
    """Mesh file is not a PLY we can read (wrong magic or byte order)."""


class OutOfBounds(ZeroposeError):
    """Coordinate outside the mesh bounding box beyond tolerance."""


class InvalidMesh(ZeroposeError):
    """Mesh unusable for the requested operation (e.g. zero triangles)."""


# --- descriptors / tensor files ----------------------------------------------

class BadMagic(ZeroposeError):
    """Tensor file does not start with the expected magic bytes."""


class UnsupportedVersion(ZeroposeError):
    """Tensor file header declares a version or dtype we do not handle."""


class TruncatedPayload(ZeroposeError):
    """Tensor file ends before the declared payload or metadata."""


class EmptyBbox(ZeroposeError):
    """Crop requested for a zero-area or fully out-of-image bounding box."""


class NoForeground(ZeroposeError):
    """Descriptor grid has no valid (foreground) patch."""


# --- matching ----------------------------------------------------------------

class DimMismatch(ZeroposeError):
    """Descriptors of different dimensionality were compared."""


class EmptyAfterFiltering(ZeroposeError):
    """No correspondence survived background filtering."""


# --- pose solver ---------------------------------------------------------------

class DegenerateConfiguration(ZeroposeError):
    """PnP input is unsolvable: fewer than 4 usable points or collinear points."""


class NoValidSolution(ZeroposeError):
    """No pose satisfying cheirality (all depths positive) was found."""


class TooFewCorrespondences(ZeroposeError):
    """RANSAC needs at least the minimal sample size of correspondences."""


class NoConsensus(ZeroposeError):
    """RANSAC found no hypothesis with enough inliers."""


# --- evaluation / io -----------------------------------------------------------

class MissingFile(ZeroposeError):
    """A required dataset file does not exist."""


class SchemaError(ZeroposeError):
    """Dataset file exists but violates the expected schema."""


class EmptyReportSet(ZeroposeError):
    """Recall aggregation over zero instances."""


class IoError(ZeroposeError):
    """Read or write of an artifact file failed."""


class ConfigError(ZeroposeError):
    """Invalid pipeline configuration."""
