"""Spatio-temporal attention (TCS3D), focal BCE and detection metrics for
classroom behavior detection at desk scale."""

__version__ = "0.1.0"
