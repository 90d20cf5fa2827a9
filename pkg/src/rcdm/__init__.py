"""rcdm – recurrent deformable/wavelet video super-resolution at desk scale."""

__version__ = "0.1.0"
