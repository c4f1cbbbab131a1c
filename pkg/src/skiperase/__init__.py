"""Concept erasure on a toy class-conditional diffusion model via
skip-connection adapters and timestep-layer modulation."""

__version__ = "0.1.0"
