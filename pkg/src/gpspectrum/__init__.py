"""Voxel-wise Gaussian-process regression of image phenotypes on a behavioural score."""

__version__ = "0.1.0"
