"""Automated nasal PAP mask sizing from a single facial photograph."""

from papmask.core import (
    BBox,
    LandmarkSet,
    Point2,
    Raster,
    SeededRng,
    SizeBin,
    SizeChart,
    bbox_iou,
    size_bin,
)
from papmask.errors import (
    DataError,
    InvalidMeasurement,
    ModelFormatError,
    PapmaskError,
    StageFailure,
)

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "DataError",
    "InvalidMeasurement",
    "LandmarkSet",
    "ModelFormatError",
    "PapmaskError",
    "Point2",
    "Raster",
    "SeededRng",
    "SizeBin",
    "SizeChart",
    "StageFailure",
    "bbox_iou",
    "size_bin",
]
