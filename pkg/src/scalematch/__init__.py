"""Scale-ratio estimation and scale-difference-aware image matching."""

__version__ = "0.1.0"
