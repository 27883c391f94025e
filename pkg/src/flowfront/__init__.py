"""Flow-guided face frontalization at desk scale.

Single-image bi-directional flow estimation, flow-guided feature warping with
attention-gated skips, and illumination-preserving frontal synthesis trained
under illumination-inconsistent supervision, plus a synthetic face corpus
that makes every piece testable on a laptop.
"""

from .core import Config, FlowField, Image, LandmarkSet, Mask, Sample
from .data import DatasetManifest, SyntheticDataset, build_manifest, render_synthetic
from .gfilter import GuidedFilterParams, guided_filter
from .warp import bilinear_warp, flow_to_color, warp_image

__version__ = "0.1.0"

__all__ = [
    "Config",
    "DatasetManifest",
    "FlowField",
    "GuidedFilterParams",
    "Image",
    "LandmarkSet",
    "Mask",
    "Sample",
    "SyntheticDataset",
    "bilinear_warp",
    "build_manifest",
    "flow_to_color",
    "guided_filter",
    "render_synthetic",
    "warp_image",
    "__version__",
]
