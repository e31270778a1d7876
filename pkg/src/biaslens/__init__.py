"""Cross-lingual ideological bias audits for generative language models."""

__version__ = "0.1.0"
