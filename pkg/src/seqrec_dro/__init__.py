"""Robust training objectives for SASRec-style sequential recommenders."""

__version__ = "0.1.0"
