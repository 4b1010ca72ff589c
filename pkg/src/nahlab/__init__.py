"""Desk-scale near-field acoustic holography laboratory.

Synthesizes vibrating-plate datasets, trains a complex-valued U-Net to invert
hologram pressure into source velocity, adapts it to out-of-distribution
samples with a propagation-residual loss only, and benchmarks against a
sparse equivalent-source reconstruction.
"""

__version__ = "0.1.0"
