"""Fine-grained hashing: part-attentive codes, feature exchange, Hamming retrieval."""

__version__ = "0.1.0"
