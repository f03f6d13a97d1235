"""Masked bounding-box reconstruction for few-shot predicate detection."""

__version__ = "0.1.0"
