"""Occupancy-supervised vision-language-action model at desk scale."""

__version__ = "0.1.0"
