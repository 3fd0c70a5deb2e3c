"""Hierarchical VAE laboratory with a deterministic context latent.

Submodules:

- ``tensor``: record/replay reverse-mode autodiff over numpy arrays
- ``dct``: the frequency-domain (and downsampling) context codecs
- ``model``: the top-down hierarchical VAE
- ``diffusion``: the denoising prior over quantized context codes
- ``training``: joint objective, optimizer, and the training loop
- ``diagnostics``: posterior-collapse metrics
- ``evaluate``: bounds, image-quality metrics, and the compression harness
- ``data``: IDX/PPM ingestion, binarization, procedural stand-in datasets
- ``config``: run configuration parsing with hyperparameter defaults
"""

__version__ = "0.1.0"

from . import data, dct, diffusion, model, tensor, training  # noqa: F401
