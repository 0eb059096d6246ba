"""Continual forecasting on growing sensor graphs with a low-rank prompt pool."""

__version__ = "0.1.0"
