"""Layered imitation learning with adaptive control: training, simulation and gap metrics."""

__version__ = "0.1.0"
