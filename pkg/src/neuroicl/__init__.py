"""Spiking in-context learning transformer for quantized MIMO symbol detection."""

__version__ = "0.1.0"
