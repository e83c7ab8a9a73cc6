"""Non-negative reactive-mixing simulation and NTFk feature extraction."""
__version__ = "0.1.0"
