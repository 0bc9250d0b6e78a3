"""Recall metrics and product-rule triplet ranking.

R@k counts each (item, ground-truth label) pair as an independent retrieval
target, so multi-predicate edges contribute several targets. mR@k averages
per-class recalls over the classes that occur. Triplet candidates score as
subject probability x predicate probability x object probability, ranked
per scene with a deterministic tie-break; the neutral "and" class encodes
relation absence and is excluded from candidates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError
from .finetune import FinetuneConfig, classify_edges, classify_nodes, head_specs
from .graph import EncoderConfig, encode
from .nn import Checkpoint
from .scenes import NEUTRAL_PREDICATE, LabelVocabulary, Scene


def _topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Top-k class indices by score, ties broken by ascending class index."""
    order = np.argsort(-scores, kind="stable")
    return order[:k]


def recall_at_k(scores: np.ndarray, gt_sets: list[set[int]], k: int) -> float:
    """Fraction of (item, gt-label) pairs whose label ranks in the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if scores.shape[0] == 0 or scores.shape[0] != len(gt_sets):
        raise ValueError("scores and ground truth must be nonempty and aligned")
    if any(len(gt) == 0 for gt in gt_sets):
        raise ValueError("every item needs at least one ground-truth label")
    hits = total = 0
    for i, gt in enumerate(gt_sets):
        top = set(_topk_indices(scores[i], k).tolist())
        hits += len(gt & top)
        total += len(gt)
    return hits / total


def per_class_recall_at_k(scores: np.ndarray, gt_sets: list[set[int]], k: int) -> dict[int, float]:
    """Recall@k per class, over items whose ground truth contains the class."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if scores.shape[0] == 0 or scores.shape[0] != len(gt_sets):
        raise ValueError("scores and ground truth must be nonempty and aligned")
    hits: dict[int, int] = {}
    totals: dict[int, int] = {}
    for i, gt in enumerate(gt_sets):
        if not gt:
            raise ValueError("every item needs at least one ground-truth label")
        top = set(_topk_indices(scores[i], k).tolist())
        for c in gt:
            totals[c] = totals.get(c, 0) + 1
            hits[c] = hits.get(c, 0) + (1 if c in top else 0)
    return {c: hits[c] / totals[c] for c in totals}


def mean_recall_at_k(scores: np.ndarray, gt_sets: list[set[int]], k: int) -> float:
    """Unweighted mean of per-class recall@k over classes present in gt."""
    per_class = per_class_recall_at_k(scores, gt_sets, k)
    return float(np.mean(list(per_class.values())))


def score_triplets(
    node_probs: np.ndarray,
    edge_probs: np.ndarray,
    edge_index: np.ndarray,
    k: int,
    exclude_predicate: int | None = None,
) -> list[tuple[float, int, int, int, int]]:
    """Top-k candidate triplets, each (score, edge_pos, subj, pred, obj).

    Every (edge, subject class, predicate class, object class) combination
    scores as the product of the three probabilities; candidates are ranked
    descending with ties broken by (edge_pos, subj, pred, obj).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n_obj = node_probs.shape[1]
    pred_classes = np.arange(edge_probs.shape[1])
    if exclude_predicate is not None:
        pred_classes = pred_classes[pred_classes != exclude_predicate]
    if edge_index.shape[0] == 0 or pred_classes.size == 0:
        return []
    scores = []
    cols = []
    for e, (i, j) in enumerate(edge_index):
        s = node_probs[i][:, None, None] * edge_probs[e][pred_classes][None, :, None] * node_probs[j][None, None, :]
        scores.append(s.reshape(-1))
        a, p, b = np.meshgrid(np.arange(n_obj), pred_classes, np.arange(n_obj), indexing="ij")
        cols.append(np.stack([np.full(a.size, e), a.reshape(-1), p.reshape(-1), b.reshape(-1)], axis=1))
    flat_scores = np.concatenate(scores)
    flat_cols = np.concatenate(cols, axis=0)
    order = np.lexsort((flat_cols[:, 3], flat_cols[:, 2], flat_cols[:, 1], flat_cols[:, 0], -flat_scores))
    top = order[:k]
    return [
        (float(flat_scores[t]), int(flat_cols[t, 0]), int(flat_cols[t, 1]), int(flat_cols[t, 2]), int(flat_cols[t, 3]))
        for t in top
    ]


def relationship_recall(
    ranked: list[tuple[float, int, int, int, int]],
    gt_triplets: list[tuple[int, int, int, int]],
    k: int,
) -> float | None:
    """Fraction of gt (edge_pos, subj, pred, obj) tuples in the top-k list.

    Returns None when the scene has no ground-truth relationships (such
    scenes are excluded from the dataset average).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not gt_triplets:
        return None
    top = {tuple(entry[1:]) for entry in ranked[:k]}
    hits = sum(1 for gt in gt_triplets if tuple(gt) in top)
    return hits / len(gt_triplets)


@dataclass
class MetricsReport:
    object_recall: dict[int, float]
    object_mean_recall: dict[int, float]
    predicate_recall: dict[int, float]
    predicate_mean_recall: dict[int, float]
    relationship_recall: dict[int, float]
    per_class_object: dict[str, dict[int, float]]
    per_class_predicate: dict[str, dict[int, float]]
    counts: dict[str, int]


DEFAULT_OBJECT_KS = (1, 5, 10)
DEFAULT_PREDICATE_KS = (1, 3, 5)
DEFAULT_RELATIONSHIP_KS = (50, 100)


def scene_ground_truth(scene: Scene, instance_ids: list[int], edge_index: np.ndarray, vocabulary: LabelVocabulary):
    """Node gt sets, edge gt sets ("and" when relation-free), gt triplet tuples."""
    labels = {inst.id: inst.label for inst in scene.instances}
    node_gt = [{vocabulary.object_index(labels[iid])} for iid in instance_ids]
    rel_map: dict[tuple[int, int], set[int]] = {}
    for rel in scene.relationships:
        rel_map.setdefault((rel.subject_id, rel.object_id), set()).add(vocabulary.predicate_index(rel.predicate))
    neutral = vocabulary.predicate_index(NEUTRAL_PREDICATE)
    edge_gt = []
    gt_triplets = []
    for e, (a, b) in enumerate(edge_index):
        i, j = instance_ids[a], instance_ids[b]
        preds = rel_map.get((i, j))
        edge_gt.append(set(preds) if preds else {neutral})
        if preds:
            si = vocabulary.object_index(labels[i])
            oj = vocabulary.object_index(labels[j])
            for p in preds:
                gt_triplets.append((e, si, p, oj))
    return node_gt, edge_gt, gt_triplets


def evaluate(
    checkpoint: Checkpoint,
    scenes: list[Scene],
    vocabulary: LabelVocabulary,
    config: EncoderConfig,
    finetune_cfg: FinetuneConfig | None = None,
    object_ks: tuple[int, ...] = DEFAULT_OBJECT_KS,
    predicate_ks: tuple[int, ...] = DEFAULT_PREDICATE_KS,
    relationship_ks: tuple[int, ...] = DEFAULT_RELATIONSHIP_KS,
) -> MetricsReport:
    """Encode -> classify (batch norm in eval mode) -> recall metrics."""
    finetune_cfg = finetune_cfg or FinetuneConfig()
    n_obj, n_pred = len(vocabulary.object_labels), len(vocabulary.predicate_labels)
    specs = head_specs(config, finetune_cfg, n_obj, n_pred)
    expected = f"finetune|{config.fingerprint()}|"
    if not checkpoint.fingerprint.startswith(expected):
        raise CheckpointError(f"evaluate needs a fine-tune checkpoint matching {expected!r}, got {checkpoint.fingerprint!r}")
    neutral = vocabulary.predicate_index(NEUTRAL_PREDICATE)

    all_node_scores, all_node_gt = [], []
    all_edge_scores, all_edge_gt = [], []
    rel_fractions: dict[int, list[float]] = {k: [] for k in relationship_ks}
    for scene in scenes:
        graph = encode(scene, checkpoint.params, config)
        node_probs = classify_nodes(graph.node_features, checkpoint.params, specs["head_obj."])
        node_gt, edge_gt, gt_triplets = scene_ground_truth(scene, graph.instance_ids, graph.edge_index, vocabulary)
        all_node_scores.append(node_probs)
        all_node_gt.extend(node_gt)
        if graph.edge_index.shape[0]:
            edge_probs = classify_edges(graph.edge_features, checkpoint.params, specs["head_pred."])
            all_edge_scores.append(edge_probs)
            all_edge_gt.extend(edge_gt)
            if relationship_ks:
                ranked = score_triplets(node_probs, edge_probs, graph.edge_index, max(relationship_ks), neutral)
                for k in relationship_ks:
                    frac = relationship_recall(ranked, gt_triplets, k)
                    if frac is not None:
                        rel_fractions[k].append(frac)

    node_scores = np.concatenate(all_node_scores, axis=0)
    edge_scores = np.concatenate(all_edge_scores, axis=0) if all_edge_scores else np.zeros((0, n_pred))

    object_recall = {k: recall_at_k(node_scores, all_node_gt, k) for k in object_ks}
    obj_by_k = {k: per_class_recall_at_k(node_scores, all_node_gt, k) for k in object_ks}
    object_mean = {k: float(np.mean(list(obj_by_k[k].values()))) for k in object_ks}
    per_class_obj = {
        vocabulary.object_labels[c]: {k: obj_by_k[k][c] for k in object_ks}
        for c in sorted(obj_by_k[object_ks[0]])
    }
    if edge_scores.shape[0]:
        predicate_recall = {k: recall_at_k(edge_scores, all_edge_gt, k) for k in predicate_ks}
        pred_by_k = {k: per_class_recall_at_k(edge_scores, all_edge_gt, k) for k in predicate_ks}
        predicate_mean = {k: float(np.mean(list(pred_by_k[k].values()))) for k in predicate_ks}
        per_class_pred = {
            vocabulary.predicate_labels[c]: {k: pred_by_k[k][c] for k in predicate_ks}
            for c in sorted(pred_by_k[predicate_ks[0]])
        }
    else:
        predicate_recall, predicate_mean, per_class_pred = {}, {}, {}
    relationship = {k: float(np.mean(v)) for k, v in rel_fractions.items() if v}
    counts = {
        "scenes": len(scenes),
        "nodes": int(node_scores.shape[0]),
        "edges": int(edge_scores.shape[0]),
        "scenes_with_relationships": len(next(iter(rel_fractions.values()), [])),
    }
    return MetricsReport(
        object_recall, object_mean, predicate_recall, predicate_mean, relationship, per_class_obj, per_class_pred, counts
    )


def render_report(report: MetricsReport) -> str:
    lines = []
    for name, table in (
        ("object_recall", report.object_recall),
        ("object_mean_recall", report.object_mean_recall),
        ("predicate_recall", report.predicate_recall),
        ("predicate_mean_recall", report.predicate_mean_recall),
        ("relationship_recall", report.relationship_recall),
    ):
        for k, value in sorted(table.items()):
            lines.append(f"{name}@{k} = {value:.4f}")
    for name, value in report.counts.items():
        lines.append(f"count.{name} = {value}")
    return "\n".join(lines) + "\n"


def per_class_csv(report: MetricsReport) -> str:
    rows = ["kind,label,k,recall"]
    for kind, table in (("object", report.per_class_object), ("predicate", report.per_class_predicate)):
        for label, recalls in table.items():
            for k, value in sorted(recalls.items()):
                rows.append(f"{kind},{label},{k},{value:.6f}")
    return "\n".join(rows) + "\n"
