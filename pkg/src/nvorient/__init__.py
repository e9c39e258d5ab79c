"""Simulation and closed-loop control of laser-written NV centers in diamond."""

__version__ = "0.1.0"
