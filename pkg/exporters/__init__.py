"""Exporters - metrics tables and PNG overlays."""
