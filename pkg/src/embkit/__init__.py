"""Desk-scale toolkit for training and evaluating dense and sparse text embedders."""

__version__ = "0.1.0"
