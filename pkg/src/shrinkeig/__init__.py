"""Gaussian-weighted spectra on self-shrinkers and the coupled problem behind the 1/4 bound."""

from .geometry import (AmbientMesh, MeshError, ShrinkerMesh, build_ambient_mesh, make_cylinder,
                       make_ellipse, make_plane, make_sphere, max_residual, shrinker_residual)
from .spectrum import EigenResult, first_eigenpair, rayleigh_quotient, spectrum_k
from .weighted_forms import WeightedOperatorSet, assemble_surface_forms, weighted_area

__version__ = "0.1.0"

__all__ = [
    "AmbientMesh", "EigenResult", "MeshError", "ShrinkerMesh", "WeightedOperatorSet",
    "assemble_surface_forms", "build_ambient_mesh", "first_eigenpair", "make_cylinder",
    "make_ellipse", "make_plane", "make_sphere", "max_residual", "rayleigh_quotient",
    "shrinker_residual", "spectrum_k", "weighted_area",
]
