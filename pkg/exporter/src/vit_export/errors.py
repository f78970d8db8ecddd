class ExporterError(Exception):
    """Base class for exporter failures."""


class ModelLoadError(ExporterError):
    """Weights file missing, unreadable, or shaped for a different model."""


class ShapeError(ExporterError):
    """Input crop or mask is not the expected 224 x 224."""
