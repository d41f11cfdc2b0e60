"""Desk-scale X-ray CT toolkit: neural beam-hardening correction followed by
learned sparse-view artifact suppression, on synthetic single-material phantoms."""

from bhxct.core import (
    ArrayHeader,
    Geometry,
    Image2D,
    Sinogram,
    export_pgm,
    fan_geometry,
    load_image,
    load_sinogram,
    parallel_geometry,
    read_array,
    save_image,
    save_sinogram,
    write_array,
)
from bhxct.physics import BhParams, NoiseSpec

__version__ = "0.1.0"

__all__ = [
    "ArrayHeader",
    "BhParams",
    "Geometry",
    "Image2D",
    "NoiseSpec",
    "Sinogram",
    "export_pgm",
    "fan_geometry",
    "load_image",
    "load_sinogram",
    "parallel_geometry",
    "read_array",
    "save_image",
    "save_sinogram",
    "write_array",
]
