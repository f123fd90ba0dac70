"""Weakly-supervised 3-D segmentation from image-level labels.

A classifier trained on whole volumes scores sub-windows; two window
agents sharing one policy are trained by self-play to find high-scoring
windows, and at inference the visited windows' scores are accumulated
into a voxel map that is thresholded into a mask.
"""

__version__ = "0.1.0"
