"""Desk-scale 3D scene graph learning with language-aligned features.

Builds feature graphs from instanced point clouds, pre-trains them against
text embeddings with a margin-based cosine contrastive loss, fine-tunes for
object/predicate classification, evaluates with recall metrics, and answers
zero-shot room-type queries from pooled graph features.
"""

__version__ = "0.1.0"
