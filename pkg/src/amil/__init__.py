"""Adversarial multiple-instance residual networks for keypoint heatmaps."""

__version__ = "0.1.0"
