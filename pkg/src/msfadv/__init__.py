"""Differentiable LiDAR/camera simulation and adversarial 3D object optimization."""

__version__ = "0.1.0"
