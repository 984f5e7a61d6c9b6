"""Age-disentangled speaker embeddings trained with aging-aware MI minimisation."""

__version__ = "0.1.0"
