"""Reconstruction of a potential on a cylinder-type manifold from its
Dirichlet-to-Neumann map, with the operator machinery it rests on."""

from . import carleman, cgo, forward, geometry, pipeline, quasimodes, raytransform, traces
from .errors import CTAError

__version__ = "0.1.0"

__all__ = ["CTAError", "carleman", "cgo", "forward", "geometry", "pipeline", "quasimodes", "raytransform", "traces", "__version__"]
