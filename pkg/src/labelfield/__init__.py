"""Desk-scale engine that turns coarse 3D bounding-primitive annotations into
dense, multi-view-consistent 2D panoptic labels.

A radiance field and two semantic fields (one fixed, derived from primitive
membership; one learned) are optimized jointly against weak 2D supervision,
then rendered into per-view semantic, instance, and panoptic label maps.
"""

__version__ = "0.1.0"

from .errors import ConfigError, LabelFieldError, NumericError, ParseError
from .estimator import PanopticLabelTransfer
from .scene import SceneSpec, gen_scene, load_bundle, save_bundle

__all__ = [
    "ConfigError",
    "LabelFieldError",
    "NumericError",
    "ParseError",
    "PanopticLabelTransfer",
    "SceneSpec",
    "__version__",
    "gen_scene",
    "load_bundle",
    "save_bundle",
]
