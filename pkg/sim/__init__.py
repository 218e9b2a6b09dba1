"""Tabletop simulator, scripted expert and dataset I/O."""
