"""Stance discovery from retweet incidence: hierarchical PCA, HDBSCAN and Louvain."""
__version__ = "0.1.0"

from .errors import ConfigError, DataError, DegenerateError, StanceError  # noqa: E402

__all__ = ["ConfigError", "DataError", "DegenerateError", "StanceError", "__version__"]
