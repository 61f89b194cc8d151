"""Face synthesis with identity-attribute disentanglement for cross-domain recognition."""

__version__ = "0.1.0"
