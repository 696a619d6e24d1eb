"""Bundled case files and load profiles."""
