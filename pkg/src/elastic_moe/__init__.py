"""Elastic MoE experts: balanced sub-expert partitioning, proxy gating, and serving/offload simulators."""

from .errors import ValidationError
from .partition import Partition

__version__ = "0.1.0"

__all__ = ["Partition", "ValidationError", "__version__"]
