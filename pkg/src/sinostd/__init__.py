"""sinostd: sinogram degradation simulation and a learned projection-domain standardizer."""

__version__ = "0.1.0"
