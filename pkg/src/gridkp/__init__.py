"""Grid keypoint learning for stochastic video prediction."""

__version__ = "0.1.0"

from gridkp.grid import GridSpec

__all__ = ["GridSpec", "__version__"]
