"""Multiple resolution residual network segmentation on a from-scratch tensor engine."""

__version__ = "0.1.0"
