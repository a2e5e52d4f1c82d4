"""Services layer for MCF Fusion."""
