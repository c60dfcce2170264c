"""Articulated 3D part discovery and optimization from silhouette ensembles."""

__version__ = "0.1.0"
