"""Region-aware attention masking for a toy MM-DiT flow-matching denoiser."""

__version__ = "0.1.0"
