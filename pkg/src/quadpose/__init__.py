"""Keypoint and descriptor learning from rendered depth, distilled to colour, for object pose estimation."""

__version__ = "0.1.0"
