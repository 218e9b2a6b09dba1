"""Tests for Oat."""
