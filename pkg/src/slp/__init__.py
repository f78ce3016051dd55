"""Constructive-interference symbol-level precoding for the MU-MISO downlink.

Per-slot scaling-factor solvers that reuse one block-level channel
factorization across all symbol slots, an exact small-scale reference
solver, an unfolded trainable variant, and a Monte Carlo BER harness.
"""

from .backend import active_backend, set_backend
from .constellation import ConstellationSpec, make_spec

__version__ = "0.1.0"

__all__ = ["ConstellationSpec", "make_spec", "active_backend", "set_backend", "__version__"]
