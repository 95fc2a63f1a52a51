"""Tests for target-vae."""
