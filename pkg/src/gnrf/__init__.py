"""Gear-stratified dynamic radiance fields with promptable object tracking."""

__version__ = "0.1.0"
