"""Dynamic channel pruning with per-layer gating heads, on a numpy training engine."""

__version__ = "0.1.0"
