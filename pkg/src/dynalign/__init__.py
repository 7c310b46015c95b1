"""Learnable multi-dimensional label tokens aligned with video through temporal towers."""

from .estimator import DynamicAlignmentClassifier

__version__ = "0.1.0"
__all__ = ["DynamicAlignmentClassifier"]
