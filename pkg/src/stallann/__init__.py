"""Graph ANN index that runs update work inside search-side I/O stalls."""

__version__ = "0.1.0"
