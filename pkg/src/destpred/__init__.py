"""Destination prediction from top-down scene layouts and command embeddings."""

__version__ = "0.1.0"

from .geometry import PixelFrame, ego_to_pixel, pixel_to_ego
from .mixture import Mixture2D

__all__ = ["PixelFrame", "ego_to_pixel", "pixel_to_ego", "Mixture2D", "__version__"]
