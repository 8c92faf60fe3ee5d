"""Self-supervised representation learning for multi-channel non-stationary time series."""

__version__ = "0.1.0"
