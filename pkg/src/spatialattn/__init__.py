"""Multi-look-direction neural beamforming with spatial attention pooling."""

__version__ = "0.1.0"
