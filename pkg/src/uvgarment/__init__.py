"""Garment mesh recovery from partial point clouds.

Implicit sewing-pattern geometry, a diffusion prior over UV-space
deformations, and guided reverse diffusion for completing sparse
observations into full garment meshes.
"""

__version__ = "0.1.0"
