"""Robust multiuser beamforming with learned error covariances."""

__version__ = "0.1.0"
