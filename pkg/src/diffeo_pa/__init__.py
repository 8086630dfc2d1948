"""Diurnal physical-activity change as diffeomorphic deformations."""

__version__ = "0.1.0"
