"""Tensor core, attention and encoder layers for MCF Fusion."""
