"""Federated syndrome-retrieval service at desk scale.

Silos collaboratively train a global embedding ensemble under non-zero-sum
secure aggregation, then serve privacy-preserving top-k syndrome retrieval
through a masked Gram-matrix protocol.  Includes data-distribution
robustness harnesses and an embedding-inversion attack demo.
"""

__version__ = "0.1.0"
