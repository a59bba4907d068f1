"""Deformation-aware unpaired image translation and keypoint transfer for
lab-animal pose estimation."""

__version__ = "0.1.0"
