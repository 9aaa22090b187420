"""Blind denoising UNets and the geometry of their spatially averaged middle-block features."""

__version__ = "0.1.0"
