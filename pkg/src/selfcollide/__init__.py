"""Latent-space self-collision detection and handling for deformable meshes."""

__version__ = "0.1.0"
