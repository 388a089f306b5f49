"""Mixed and transverse geodesic ray transforms of 1-tensors near a convex boundary."""

__version__ = "0.1.0"
