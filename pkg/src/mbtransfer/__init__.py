"""Optical-to-optical&SAR collaborative distillation with information regulation."""

__version__ = "0.1.0"
