"""FDIA detection and localization on power grids with ARMA graph filters and attention."""

__version__ = "0.1.0"
