"""provgad: provenance-graph anomaly detection.

Builds reduced provenance graphs from audit logs, learns self-supervised
node/batch embeddings with a masked graph auto-encoder, and flags outliers by
normalized k-nearest-neighbor distance against memorized benign embeddings.
"""

__version__ = "0.1.0"
