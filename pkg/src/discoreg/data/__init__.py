"""Phantoms, NIfTI I/O and preprocessing."""
from .nifti import NiftiError, read_nifti, write_nifti
from .phantom import (
    Geometry,
    Motion,
    PhantomPair,
    PhantomSpec,
    PhantomSpecError,
    contraction_phantom,
    generate_phantom,
    shift_phantom,
    sliding_phantom,
)
from .preprocess import crop_pad, histogram_match

__all__ = [
    "NiftiError",
    "read_nifti",
    "write_nifti",
    "Geometry",
    "Motion",
    "PhantomPair",
    "PhantomSpec",
    "PhantomSpecError",
    "contraction_phantom",
    "generate_phantom",
    "shift_phantom",
    "sliding_phantom",
    "crop_pad",
    "histogram_match",
]
