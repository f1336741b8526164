"""Multi-amp guitar tone modelling with a conditional gated convolutional
generator, a contrastive tone encoder and zero-shot tone selection."""

__version__ = "0.1.0"
