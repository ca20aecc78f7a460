"""Causal 6-DoF RGBD object tracking with online neural SDF reconstruction."""

__version__ = "0.1.0"
