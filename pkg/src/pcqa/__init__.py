"""Point-cloud quality assessment toolkit: sampling, rendering, distortion
synthesis, instruction data, a desk-scale fusion model and evaluation."""

__version__ = "0.1.0"
