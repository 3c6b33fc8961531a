"""Stereo-vision 6-DOF pose estimation toolkit at desk scale."""

__version__ = "0.1.0"
