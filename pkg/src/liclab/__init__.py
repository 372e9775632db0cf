"""Few-shot domain adaptation for a small learned image codec.

Modules: ``tensor`` (autograd over numpy), ``codec`` (hyperprior codec),
``adapters`` (Conv/LoRA adapters), ``trainer`` (two-stage adaptation),
``coder`` (range coder and bitstreams), ``analysis`` (channel statistics,
spectra, BD-rate), ``datagen`` (synthetic domains), ``cli``.
"""

__version__ = "0.1.0"
