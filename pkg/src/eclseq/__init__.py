"""Equivariant contrastive learning for sequential recommendation, on a numpy autodiff core."""

__version__ = "0.1.0"
