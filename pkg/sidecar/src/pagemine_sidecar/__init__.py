"""HTTP server exposing a text-prompted detector and a box-prompted segmenter."""

__version__ = "0.1.0"
