"""Multi-view masked autoencoding for cardiac cine MRI, with task heads,
cardiac metrics and population statistics, checked on a synthetic phantom."""

__version__ = "0.1.0"
