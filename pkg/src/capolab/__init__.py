"""Consensus aggregation of PPO replicas, with Fisher-geometry diagnostics."""
from capolab.kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
