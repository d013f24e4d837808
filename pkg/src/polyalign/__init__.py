"""Aligning misregistered building polygons to imagery with per-scale networks
trained on self-generated deformations, refined over multiple rounds."""

from .geometry import AnnotationSet, DisplacementField, Polygon
from .pipeline import AlignmentModel, align_multiresolution, run_multiround

__all__ = ["AnnotationSet", "DisplacementField", "Polygon", "AlignmentModel", "align_multiresolution",
           "run_multiround"]
__version__ = "0.1.0"
