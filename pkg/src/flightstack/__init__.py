"""Multirotor flight-control stack: simulation, estimation, tracking and control."""

__version__ = "0.1.0"
