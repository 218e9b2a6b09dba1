"""Core types, config, errors and the end-to-end pipeline."""
