"""Utility modules: colours, progress, gradient checks."""
