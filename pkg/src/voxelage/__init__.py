"""Synthetic two-year aging of 3D brain volumes with a baseline-conditioned
denoising diffusion model, evaluated end to end on procedural brain phantoms
with analytic ground-truth volumetrics."""

__version__ = "0.1.0"

from voxelage.errors import DataError, NumericalError
from voxelage.volume import LabelVolume, Volume

__all__ = ["Volume", "LabelVolume", "DataError", "NumericalError", "__version__"]
