"""Fluence-map diffusion generation and learned-optimizer VMAT planning at desk scale."""

__version__ = "0.1.0"
