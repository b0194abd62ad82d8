"""Token-divergence metrics and metric-guided compression on a toy transformer."""

__version__ = "0.1.0"
