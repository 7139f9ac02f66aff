"""Open-set animal re-identification toolkit over precomputed embeddings."""

__version__ = "0.1.0"

NEW_INDIVIDUAL = "new_individual"
