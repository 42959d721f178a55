"""Low-rank adapter fine-tuning for convolutional segmentation networks."""

__version__ = "0.1.0"
