"""Optimal control of a collective migration model."""
