"""Recurrent video transformer for fatigue estimation from face clips."""

__version__ = "0.1.0"
