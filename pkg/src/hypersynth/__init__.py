"""Blind hyperspectral unmixing and diffusion-based synthesis of
abundance maps."""

__version__ = "0.1.0"

from .errors import (ConfigError, ContainerError, HypersynthError,
                     NumericalError)
from .hsi_core import (AbundanceStack, EndmemberMatrix, HyperCube, Patch,
                       drop_bands, extract_patches, load_abundance, load_cube,
                       normalize_cube, save_abundance, save_cube)

__all__ = [
    "AbundanceStack", "EndmemberMatrix", "HyperCube", "Patch",
    "ConfigError", "ContainerError", "HypersynthError", "NumericalError",
    "drop_bands", "extract_patches", "load_abundance", "load_cube",
    "normalize_cube", "save_abundance", "save_cube",
]
