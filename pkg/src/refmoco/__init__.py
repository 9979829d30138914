"""Reference-guided retrospective rigid motion correction for 3D Cartesian MRI."""

__version__ = "0.1.0"
