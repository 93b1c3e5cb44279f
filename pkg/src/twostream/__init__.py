"""Two-stream fine-grained classifier: vision stream + image/text joint embedding."""

__version__ = "0.1.0"
