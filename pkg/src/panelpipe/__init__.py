"""panelpipe: historical table scans in, validated county-by-year panel out."""

__version__ = "0.1.0"
