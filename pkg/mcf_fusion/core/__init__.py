"""Core modules for MCF Fusion."""
