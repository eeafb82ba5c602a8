"""Functional and energy simulator of an MRAM processing-in-memory CNN accelerator."""

__version__ = "0.1.0"
