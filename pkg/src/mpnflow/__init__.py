"""Graph-based multi-object tracking and segmentation at desk scale."""

__version__ = "0.1.0"
