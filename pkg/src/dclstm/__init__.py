"""Dual CNN+LSTM traffic-speed forecaster with a time marker, built on a small numpy autodiff core."""

__version__ = "0.1.0"
