"""Physics-informed convolutional autoencoder for false-data-injection detection."""

__version__ = "0.1.0"
