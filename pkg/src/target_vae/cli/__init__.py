"""CLI module for target-vae."""
