"""Helper functions for target-vae: file formats and image export."""
