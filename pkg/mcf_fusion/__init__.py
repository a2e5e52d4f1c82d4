"""MCF Fusion - multimodal context fusion for context-aware emotion recognition."""

__version__ = "0.1.0"
