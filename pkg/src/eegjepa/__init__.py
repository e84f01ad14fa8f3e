"""Self-supervised EEG representation learning and downstream BCI evaluation.

The package covers the full desk-scale loop: synthetic EEG generation,
preprocessing and slicing, masked latent pre-training with an EMA teacher,
three downstream classifier architectures with two fine-tuning regimes, and a
resumable grid harness that ranks pipelines across paradigms.
"""

__version__ = "0.1.0"
