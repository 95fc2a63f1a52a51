"""Core model code for target-vae."""
