"""Doppler-shift photo name tagging: simulator, receiver DSP and tag engine."""

__version__ = "0.1.0"
