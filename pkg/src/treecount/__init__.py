"""Semi-supervised tree counting with a pyramid-transformer density regressor."""

__version__ = "0.1.0"
