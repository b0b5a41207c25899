"""Rotation- and parity-covariant spherical-tensor filters for tract mapping from diffusion MRI."""

from . import features, fields, formats, model, sta, tracking, tracts
from .errors import TractFilterError
from .features import ScaleConfig, enumerate_features
from .fields import DwiVolume, RadialKernel, STField, VolumeGrid, sh_project
from .model import FilterModel, build_pyramid, fit_filter, forward, prepare_sample, train
from .tracking import TrackingParams, apparent_volume, dice, icc, track
from .tracts import PhantomSpec, Streamline, WaypointSpec, generate_phantom, rasterize_label, select_tract

__version__ = "0.1.0"

__all__ = [
    "DwiVolume",
    "FilterModel",
    "PhantomSpec",
    "RadialKernel",
    "STField",
    "ScaleConfig",
    "Streamline",
    "TractFilterError",
    "TrackingParams",
    "VolumeGrid",
    "WaypointSpec",
    "apparent_volume",
    "build_pyramid",
    "dice",
    "enumerate_features",
    "features",
    "fields",
    "fit_filter",
    "formats",
    "forward",
    "generate_phantom",
    "icc",
    "model",
    "prepare_sample",
    "rasterize_label",
    "select_tract",
    "sh_project",
    "sta",
    "track",
    "tracking",
    "tracts",
    "train",
]
