"""Bottom-up gridded population estimation from microcensus survey clusters."""

__version__ = "0.1.0"
