"""Configuration module for target-vae."""
