"""Dataset synthesis and ingestion."""
