"""Spectral numerics for Q-curvature, Yamabe-type quotients and their flows on zonal conformal classes."""

__version__ = "0.1.0"
