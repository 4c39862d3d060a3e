"""Batch-sampling load balancing: mean-field ODE, fixed point, and CTMC simulation."""
from .model import SystemParams, fixed_point, tail_bounds

__version__ = "0.1.0"

__all__ = ["SystemParams", "fixed_point", "tail_bounds", "__version__"]
