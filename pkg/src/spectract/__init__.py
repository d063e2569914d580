"""spectract: spectral CT simulation and dual-domain latent-diffusion reconstruction."""

from .geometry import (
    FanBeamGeometry,
    ImageGrid,
    RayPath,
    siddon_path,
    forward_project,
    back_project,
    fbp_reconstruct,
    FULL_SCALE_GEOMETRY,
    TOY_GEOMETRY,
    TOY_GRID,
)

__version__ = "0.1.0"
