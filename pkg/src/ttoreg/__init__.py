"""Unsupervised deformable registration with population training and
per-subject test-time optimization, on synthetic phantom cohorts."""

__version__ = "0.1.0"
