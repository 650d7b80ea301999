"""Desk-scale 360-degree out-painting stack: geometry, scan kernels, toy
latent diffusion, Mamba-based conditioning, and the iterative generation
pipeline, on a small from-scratch autodiff engine."""

__version__ = "0.1.0"
