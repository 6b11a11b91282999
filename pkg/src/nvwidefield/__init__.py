"""Simulator and reconstruction toolkit for widefield NV-diamond imaging of circuit currents."""

__version__ = "0.1.0"
