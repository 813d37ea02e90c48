"""MaskDNA: masked discrete diffusion language modeling for DNA sequences."""

__version__ = "0.1.0"
