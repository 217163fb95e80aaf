"""Desk-scale text-to-3D engine built on Gaussian splatting and score distillation."""

__version__ = "0.1.0"
