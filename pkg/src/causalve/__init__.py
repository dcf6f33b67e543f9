"""Face-video privacy pipeline: cover generation, invertible video hiding and steganalysis."""

__version__ = "0.1.0"
