"""Trace-driven streaming of tiled point cloud video with federated actor-critic ABR."""

__version__ = "0.1.0"
