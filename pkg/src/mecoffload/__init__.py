"""Slotted mobile-edge-computing offloading simulator with a numpy deep Q-learning stack."""

__version__ = "0.1.0"
