"""Camera-agnostic spectral imaging: encoder, self-supervised pretraining,
synthetic camera simulation, and evaluation tooling."""

__version__ = "0.1.0"
