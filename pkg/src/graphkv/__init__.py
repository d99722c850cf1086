"""Cluster-wise KV-cache reuse for batched graph-RAG inference."""

__version__ = "0.1.0"
