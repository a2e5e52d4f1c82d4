"""Tests for MCF Fusion."""
