"""Python bindings for the tipnet C++ library.

Volumes are float32 arrays of shape (nz, ny, nx); projections are
(angles, modules, nv, nu).
"""

from ._tipnet import (
    Error,
    Model,
    Operators,
    defect_size,
    fwhm,
    make_dataset,
    psnr,
    read_projections,
    read_volume,
    rmse,
    ssim,
    write_volume,
)

__all__ = [
    "Error",
    "Model",
    "Operators",
    "defect_size",
    "fwhm",
    "make_dataset",
    "psnr",
    "read_projections",
    "read_volume",
    "rmse",
    "ssim",
    "write_volume",
]
