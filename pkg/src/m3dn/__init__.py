"""Optimal-transport multi-modal multi-instance multi-label learning.

Submodules: ``ot`` (Sinkhorn and exact transport), ``kernel`` (label metric),
``network`` (per-modality bag networks), ``trainer``, ``metrics``, ``data``
and ``cli``.
"""

__version__ = "0.1.0"
