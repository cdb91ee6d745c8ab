from .degrade import (
    BOUNDARY_MODES,
    KernelError,
    add_gaussian_noise,
    blur,
    check_boundary,
    circular_blur,
    delta_kernel,
    edgetaper,
    psf2otf,
    taper_window,
    validate_kernel,
)
from .io import ImageFormatError, read_image, read_kernel, read_pfm, write_image, write_kernel, write_pfm
from .kernels import KERNEL_SIZE_RANGE, random_kernel_size, random_motion_kernel
from .metrics import gaussian_window, mse, psnr, ssim, ssim_map, to_gray
from .synth import synthetic_image, synthetic_set

__all__ = [
    "BOUNDARY_MODES",
    "KERNEL_SIZE_RANGE",
    "ImageFormatError",
    "KernelError",
    "add_gaussian_noise",
    "blur",
    "check_boundary",
    "circular_blur",
    "delta_kernel",
    "edgetaper",
    "gaussian_window",
    "mse",
    "psf2otf",
    "psnr",
    "random_kernel_size",
    "random_motion_kernel",
    "read_image",
    "read_kernel",
    "read_pfm",
    "ssim",
    "ssim_map",
    "synthetic_image",
    "synthetic_set",
    "taper_window",
    "to_gray",
    "validate_kernel",
    "write_image",
    "write_kernel",
    "write_pfm",
]
