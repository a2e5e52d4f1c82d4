"""Command layer for MCF Fusion."""
