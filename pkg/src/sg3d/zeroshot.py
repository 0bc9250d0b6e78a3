"""Zero-shot room-type classification from language-aligned node features.

Node features are projected into the text space, average-pooled over the
graph, and compared against candidate room-type embeddings by cosine; the
highest-scoring query wins. Softmax over the cosines is reported for
display only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import EncoderConfig, encode
from .nn import Checkpoint
from .pretrain import PretrainConfig, cosine, project
from .scenes import Scene
from .text import UNIT_NORM_TOL, EmbeddingTable, lookup


@dataclass(frozen=True)
class RoomQuerySet:
    labels: tuple[str, ...]
    vectors: np.ndarray  # Q x D, unit rows

    def __post_init__(self):
        if len(self.labels) < 2:
            raise ValueError("need at least two room queries")
        if self.vectors.shape[0] != len(self.labels):
            raise ValueError("one vector per query label required")
        norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise ValueError("query vectors must be unit-norm")

    @staticmethod
    def from_table(labels: list[str], table: EmbeddingTable) -> "RoomQuerySet":
        return RoomQuerySet(tuple(labels), np.stack([lookup(table, l) for l in labels]))


def pool_graph(projected_node_features: np.ndarray) -> np.ndarray:
    """Elementwise mean over node features (pre-normalization average)."""
    if projected_node_features.shape[0] == 0:
        raise ValueError("cannot pool an empty graph")
    return projected_node_features.mean(axis=0)


@dataclass
class RoomPrediction:
    label: str
    cosines: dict[str, float]
    softmax_scores: dict[str, float]


def classify_room(pooled: np.ndarray, queries: RoomQuerySet) -> RoomPrediction:
    """Argmax over cosine similarity; ties resolved by query order."""
    if float(np.linalg.norm(pooled)) == 0.0:
        raise ValueError("pooled graph feature is zero; similarity undefined")
    cosines = np.array([cosine(pooled, q) for q in queries.vectors])
    e = np.exp(cosines - cosines.max())
    soft = e / e.sum()
    best = int(np.argmax(cosines))  # first max wins: deterministic tie-break
    return RoomPrediction(
        queries.labels[best],
        {l: float(c) for l, c in zip(queries.labels, cosines)},
        {l: float(s) for l, s in zip(queries.labels, soft)},
    )


def classify_scene_room(
    scene: Scene,
    checkpoint: Checkpoint,
    queries: RoomQuerySet,
    config: EncoderConfig,
    pre: PretrainConfig,
) -> RoomPrediction:
    """Encode a scene with a pre-trained backbone and classify its room type."""
    graph = encode(scene, checkpoint.params, config)
    f_n, _, _ = project(graph, checkpoint.params, config, pre)
    return classify_room(pool_graph(f_n), queries)
