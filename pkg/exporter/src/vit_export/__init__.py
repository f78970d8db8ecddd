"""Descriptor exporter: ViT-S/8 key tokens to pose-pipeline tensor archives."""

from .errors import ExporterError, ModelLoadError, ShapeError
from .export import ExportJob, export_descriptors
from .model import ViTSmall8, load_model

__version__ = "0.1.0"

__all__ = ["ExportJob", "ExporterError", "ModelLoadError", "ShapeError",
           "ViTSmall8", "export_descriptors", "load_model", "__version__"]
