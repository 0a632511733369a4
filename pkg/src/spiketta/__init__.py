"""Spiking-network engine and spike-aware single-sample test-time adaptation."""

__version__ = "0.1.0"
