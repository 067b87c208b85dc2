"""Rigid-body trajectories for object instances seen as per-frame 3D point sets."""

__version__ = "0.1.0"
