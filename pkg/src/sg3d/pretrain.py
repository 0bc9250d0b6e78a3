"""Language-distillation pre-training.

Three projector heads map backbone features into the text-embedding space;
a margin-based cosine objective pulls each node/edge/triplet feature toward
its text target and pushes it below the margin against sampled negatives.
Edge streams use the neutral predicate for relation-free pairs; triplet
negatives are hard negatives that differ from a positive in exactly one
slot.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import TrainingError
from .graph import (
    EncoderConfig,
    FeatureGraph,
    Params,
    ScenePointSets,
    accumulate_grads,
    backbone_backward,
    backbone_forward,
    build_point_sets,
    init_backbone_params,
)
from .nn import (
    AdamSnapshot,
    AdamState,
    Checkpoint,
    MlpSpec,
    adam_step,
    linear_lr,
    mlp_backward,
    mlp_forward,
    mlp_init,
    save_checkpoint,
)
from .scenes import NEUTRAL_PREDICATE, LabelVocabulary, Scene
from .seeding import rng_for
from .text import EmbeddingTable, lookup, relationship_prompt


@dataclass(frozen=True)
class ContrastiveConfig:
    negative_margin: float = 0.5   # tau
    negative_weight: float = 1.0   # lambda_neg
    num_negatives: int = 16        # M
    stream_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)  # node, edge, triplet

    def __post_init__(self):
        if not 0 <= self.negative_margin < 1:
            raise ValueError("negative margin must be in [0, 1)")
        if self.num_negatives < 0:
            raise ValueError("num_negatives must be >= 0")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 50
    batch_size: int = 6
    base_lr: float = 1e-3
    embed_dim: int = 512
    projector_hidden: int = 1024
    seed: int = 0
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)


def projector_specs(config: EncoderConfig, pre: PretrainConfig) -> dict[str, MlpSpec]:
    F, H, D = config.feature_width, pre.projector_hidden, pre.embed_dim
    spec = lambda w: MlpSpec(w, (H, D), ("relu", "identity"))
    return {"proj.p1.": spec(F), "proj.p2.": spec(F), "proj.p3.": spec(3 * F)}


def init_projector_params(config: EncoderConfig, pre: PretrainConfig, rng: np.random.Generator, dtype=np.float32) -> Params:
    params: Params = {}
    for prefix, spec in projector_specs(config, pre).items():
        params.update(mlp_init(spec, rng, prefix, dtype))
    return params


def pretrain_fingerprint(config: EncoderConfig, pre: PretrainConfig) -> str:
    return f"pretrain|{config.fingerprint()}|D={pre.embed_dim}|hidden={pre.projector_hidden}"


def _project_forward(X, Ep, edge_index, params, specs):
    f_n, c1 = mlp_forward(specs["proj.p1."], params, X, "proj.p1.")
    if Ep.shape[0]:
        src, dst = edge_index[:, 0], edge_index[:, 1]
        T = np.concatenate([X[src], Ep, X[dst]], axis=1)
        f_p, c2 = mlp_forward(specs["proj.p2."], params, Ep, "proj.p2.")
        f_t, c3 = mlp_forward(specs["proj.p3."], params, T, "proj.p3.")
    else:
        D = f_n.shape[1]
        f_p = np.zeros((0, D), dtype=X.dtype)
        f_t = np.zeros((0, D), dtype=X.dtype)
        c2 = c3 = None
    return f_n, f_p, f_t, (c1, c2, c3, edge_index, X.shape)


def _project_backward(df_n, df_p, df_t, cache, params, specs):
    c1, c2, c3, edge_index, x_shape = cache
    F = x_shape[1]
    dX, grads = mlp_backward(specs["proj.p1."], params, c1, df_n, "proj.p1.")
    dEp = None
    if c2 is not None:
        dEp, g2 = mlp_backward(specs["proj.p2."], params, c2, df_p, "proj.p2.")
        dT, g3 = mlp_backward(specs["proj.p3."], params, c3, df_t, "proj.p3.")
        accumulate_grads(grads, g2)
        accumulate_grads(grads, g3)
        src, dst = edge_index[:, 0], edge_index[:, 1]
        np.add.at(dX, src, dT[:, :F])
        np.add.at(dX, dst, dT[:, 2 * F :])
        dEp = dEp + dT[:, F : 2 * F]
    else:
        dEp = np.zeros((0, F), dtype=dX.dtype)
    return dX, dEp, grads


def project(graph: FeatureGraph, params: Params, config: EncoderConfig, pre: PretrainConfig):
    """Projected features (f_nodes, f_edges, f_triplets); raw, not normalized."""
    specs = projector_specs(config, pre)
    f_n, f_p, f_t, _ = _project_forward(graph.node_features, graph.edge_features, graph.edge_index, params, specs)
    return f_n, f_p, f_t


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero vectors")
    return float(np.dot(a, b) / (na * nb))


@dataclass
class PositiveKeySet:
    """Per-item positive prompts for the three streams, in graph order."""

    node_labels: list[str]
    edge_predicates: list[list[str]]            # >= 1 each; ["and"] when no relation
    edge_triples: list[list[tuple[str, str, str]]]  # aligned with edge_predicates

    def sentence_keys(self) -> list[list[str]]:
        return [[relationship_prompt(*t) for t in triples] for triples in self.edge_triples]


def build_positive_keys(scene: Scene, sets: ScenePointSets) -> PositiveKeySet:
    labels = {inst.id: inst.label for inst in scene.instances}
    rel_map: dict[tuple[int, int], list[str]] = {}
    for rel in scene.relationships:
        bucket = rel_map.setdefault((rel.subject_id, rel.object_id), [])
        if rel.predicate not in bucket:
            bucket.append(rel.predicate)
    node_labels = [labels[iid] for iid in sets.instance_ids]
    edge_predicates = []
    edge_triples = []
    for a, b in sets.edge_index:
        i, j = sets.instance_ids[a], sets.instance_ids[b]
        preds = sorted(rel_map.get((i, j), [NEUTRAL_PREDICATE]))
        edge_predicates.append(preds)
        edge_triples.append([(labels[i], p, labels[j]) for p in preds])
    return PositiveKeySet(node_labels, edge_predicates, edge_triples)


@dataclass
class Negatives:
    node: list[list[str]]
    edge: list[list[str]]
    triplet: list[list[str]]  # relationship sentences


@dataclass
class IndexNegatives:
    """Negatives in label-index space: object/predicate ids, triples as (s, p, o) ids."""

    node: list[np.ndarray]
    edge: list[np.ndarray]
    triplet: list[np.ndarray]  # each m x 3 int array


class SceneNegativeSampler:
    """Per-scene negative sampler over label indices.

    Pools are precomputed once per scene (positives are static), so drawing
    per training step stays cheap. Triplet negatives replace exactly one
    slot of a uniformly chosen positive triple and are rejected (and
    redrawn) if they collide with any positive.
    """

    def __init__(self, vocabulary: LabelVocabulary, keys: PositiveKeySet):
        if not vocabulary.object_labels or not vocabulary.predicate_labels:
            raise ValueError("vocabulary must be nonempty")
        obj_index = {l: i for i, l in enumerate(vocabulary.object_labels)}
        pred_index = {l: i for i, l in enumerate(vocabulary.predicate_labels)}
        n_obj, n_pred = len(vocabulary.object_labels), len(vocabulary.predicate_labels)
        self.neutral = pred_index[NEUTRAL_PREDICATE]

        self.node_pools = []
        for label in keys.node_labels:
            own = obj_index[label]
            self.node_pools.append(np.array([i for i in range(n_obj) if i != own], dtype=np.int64))

        self.edge_pools = []
        self.edge_force_neutral = []
        for preds in keys.edge_predicates:
            positive = {pred_index[p] for p in preds}
            force = self.neutral not in positive
            pool = [i for i in range(n_pred) if i not in positive and (not force or i != self.neutral)]
            self.edge_pools.append(np.array(pool, dtype=np.int64))
            self.edge_force_neutral.append(force)

        self.edge_triples = []
        self.triple_variants = []  # per edge, per positive: (subject pool, predicate pool, object pool)
        self.positive_triples = []
        for triples in keys.edge_triples:
            idx_triples = [(obj_index[s], pred_index[p], obj_index[o]) for s, p, o in triples]
            self.edge_triples.append(idx_triples)
            self.positive_triples.append(set(idx_triples))
            variants = []
            for s, p, o in idx_triples:
                variants.append(
                    (
                        np.array([i for i in range(n_obj) if i != s], dtype=np.int64),
                        np.array([i for i in range(n_pred) if i != p], dtype=np.int64),
                        np.array([i for i in range(n_obj) if i != o], dtype=np.int64),
                    )
                )
            self.triple_variants.append(variants)

    @staticmethod
    def _draw(pool: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
        if count <= 0 or pool.size == 0:
            return pool[:0]
        if pool.size <= count:
            return pool.copy()
        return rng.choice(pool, size=count, replace=False)

    def sample(self, m: int, rng: np.random.Generator) -> IndexNegatives:
        node = [self._draw(pool, m, rng) for pool in self.node_pools]
        edge = []
        for pool, force in zip(self.edge_pools, self.edge_force_neutral):
            if m >= 1 and force:
                edge.append(np.concatenate([[self.neutral], self._draw(pool, m - 1, rng)]).astype(np.int64))
            else:
                edge.append(self._draw(pool, m, rng))
        triplet = []
        for idx_triples, variants, positives in zip(self.edge_triples, self.triple_variants, self.positive_triples):
            draws = np.empty((0, 3), dtype=np.int64) if m <= 0 else np.empty((m, 3), dtype=np.int64)
            filled = 0
            for _ in range(m):
                for _attempt in range(32):
                    src = int(rng.integers(len(idx_triples)))
                    slot = int(rng.integers(3))
                    pool = variants[src][slot]
                    if pool.size == 0:
                        continue
                    candidate = list(idx_triples[src])
                    candidate[slot] = int(pool[rng.integers(pool.size)])
                    if tuple(candidate) not in positives:
                        draws[filled] = candidate
                        filled += 1
                        break
            triplet.append(draws[:filled])
        return IndexNegatives(node, edge, triplet)


def sample_negatives(vocabulary: LabelVocabulary, keys: PositiveKeySet, m: int, rng: np.random.Generator) -> Negatives:
    """Negative prompts per node/edge/triplet, disjoint from the positives.

    The neutral predicate is forced into every edge negative set that does
    not already carry it as a positive; triplet negatives replace exactly
    one slot of a positive triple with a different vocabulary entry.
    """
    idx = SceneNegativeSampler(vocabulary, keys).sample(m, rng)
    objs, preds = vocabulary.object_labels, vocabulary.predicate_labels
    return Negatives(
        [[objs[i] for i in row] for row in idx.node],
        [[preds[i] for i in row] for row in idx.edge],
        [[relationship_prompt(objs[s], preds[p], objs[o]) for s, p, o in rows] for rows in idx.triplet],
    )


def _stream_terms(features, row_lists, matrix, positive: bool, tau: float = 0.0):
    """Loss sum and d(loss)/d(features) for one stream and one target role.

    `matrix` holds unit-norm target vectors; `row_lists[i]` indexes the
    targets of item i.
    """
    total = 0.0
    dfeats = np.zeros_like(features)
    for i, rows in enumerate(row_lists):
        count = len(rows)
        if count == 0:
            continue
        f = features[i]
        sq = float(f @ f)
        if sq == 0.0:
            # dead-relu feature: treat every cosine as 0 with no gradient, so
            # the item contributes its constant terms and training continues
            if positive:
                total += 1.0
            continue
        norm = np.sqrt(sq)
        T = matrix[rows]
        cos = (T @ f) / norm
        if positive:
            total += float(np.sum(1.0 - cos)) / count
            coeff = np.full(count, -1.0 / count)
        else:
            total += float(np.sum(np.maximum(cos - tau, 0.0))) / count
            coeff = (cos > tau).astype(np.float64) / count
        # d cos(f, t)/df = t/|f| - cos * f/|f|^2 for unit targets t
        dfeats[i] = (coeff @ T) / norm - (float(coeff @ cos) / sq) * f
    return total, dfeats


def _prompt_rows(prompt_lists: list[list[str]], table: EmbeddingTable):
    """Stack the referenced prompts into a matrix and per-item row lists."""
    row_of: dict[str, int] = {}
    vectors = []
    row_lists = []
    for prompts in prompt_lists:
        rows = []
        for p in prompts:
            if p not in row_of:
                row_of[p] = len(vectors)
                vectors.append(lookup(table, p))
            rows.append(row_of[p])
        row_lists.append(np.array(rows, dtype=np.int64))
    matrix = np.stack(vectors) if vectors else np.zeros((0, table.dim), dtype=np.float32)
    return matrix, row_lists


def positive_loss(features: np.ndarray, key_lists: list[list[str]], table: EmbeddingTable) -> float:
    """Sum over items of the mean (1 - cosine) against each positive target."""
    matrix, rows = _prompt_rows(key_lists, table)
    return _stream_terms(features, rows, matrix, positive=True)[0]


def negative_loss(features: np.ndarray, negative_lists: list[list[str]], table: EmbeddingTable, tau: float) -> float:
    """Sum over items of the mean hinge max(0, cosine - tau) against negatives."""
    matrix, rows = _prompt_rows(negative_lists, table)
    return _stream_terms(features, rows, matrix, positive=False, tau=tau)[0]


@dataclass
class SceneTargets:
    """Table rows of the positive targets plus row maps for sampled negatives."""

    matrix: np.ndarray  # unit target vectors, one row per table entry
    node_pos_rows: list[np.ndarray]
    edge_pos_rows: list[np.ndarray]
    trip_pos_rows: list[np.ndarray]
    obj_rows: np.ndarray   # object label index -> table row
    pred_rows: np.ndarray  # predicate label index -> table row
    sentence_rows: dict[tuple[int, int, int], int]
    sampler: SceneNegativeSampler


def bind_scene_targets(keys: PositiveKeySet, table: EmbeddingTable, vocabulary: LabelVocabulary) -> SceneTargets:
    row_of: dict[str, int] = {}
    vectors: list[np.ndarray] = []

    def row(prompt: str) -> int:
        if prompt not in row_of:
            row_of[prompt] = len(vectors)
            vectors.append(lookup(table, prompt))
        return row_of[prompt]

    obj_rows = np.array([row(l) for l in vocabulary.object_labels], dtype=np.int64)
    pred_rows = np.array([row(l) for l in vocabulary.predicate_labels], dtype=np.int64)
    obj_index = {l: i for i, l in enumerate(vocabulary.object_labels)}
    pred_index = {l: i for i, l in enumerate(vocabulary.predicate_labels)}

    node_pos = [np.array([row(l)], dtype=np.int64) for l in keys.node_labels]
    edge_pos = [np.array([row(p) for p in preds], dtype=np.int64) for preds in keys.edge_predicates]
    sentence_rows: dict[tuple[int, int, int], int] = {}
    trip_pos = []
    for triples in keys.edge_triples:
        rows = []
        for s, p, o in triples:
            key = (obj_index[s], pred_index[p], obj_index[o])
            # negatives substitute one slot, so preload the full one-slot closure
            for s2 in vocabulary.object_labels:
                k2 = (obj_index[s2], key[1], key[2])
                if k2 not in sentence_rows:
                    sentence_rows[k2] = row(relationship_prompt(s2, p, o))
            for p2 in vocabulary.predicate_labels:
                k2 = (key[0], pred_index[p2], key[2])
                if k2 not in sentence_rows:
                    sentence_rows[k2] = row(relationship_prompt(s, p2, o))
            for o2 in vocabulary.object_labels:
                k2 = (key[0], key[1], obj_index[o2])
                if k2 not in sentence_rows:
                    sentence_rows[k2] = row(relationship_prompt(s, p, o2))
            rows.append(sentence_rows[key])
        trip_pos.append(np.array(rows, dtype=np.int64))

    matrix = np.stack(vectors) if vectors else np.zeros((0, table.dim), dtype=np.float32)
    return SceneTargets(
        matrix, node_pos, edge_pos, trip_pos, obj_rows, pred_rows, sentence_rows,
        SceneNegativeSampler(vocabulary, keys),
    )


@dataclass
class PreparedScene:
    scene: Scene
    sets: ScenePointSets
    keys: PositiveKeySet
    targets: SceneTargets | None = None


def prepare_scene(
    scene: Scene,
    config: EncoderConfig,
    table: EmbeddingTable | None = None,
    vocabulary: LabelVocabulary | None = None,
) -> PreparedScene:
    sets = build_point_sets(scene, config)
    keys = build_positive_keys(scene, sets)
    targets = bind_scene_targets(keys, table, vocabulary) if table is not None else None
    return PreparedScene(scene, sets, keys, targets)


def _negative_rows(targets: SceneTargets, negatives: IndexNegatives):
    node = [targets.obj_rows[idx] for idx in negatives.node]
    edge = [targets.pred_rows[idx] for idx in negatives.edge]
    trip = [
        np.array([targets.sentence_rows[tuple(t)] for t in rows], dtype=np.int64)
        for rows in negatives.triplet
    ]
    return node, edge, trip


def _scene_loss_and_grads(prepared: PreparedScene, params, config, pre, negatives: IndexNegatives, want_grads=True):
    cc = pre.contrastive
    specs = projector_specs(config, pre)
    targets = prepared.targets
    X, Ep, bb_cache = backbone_forward(prepared.sets, params, config)
    f_n, f_p, f_t, proj_cache = _project_forward(X, Ep, prepared.sets.edge_index, params, specs)

    neg_rows = _negative_rows(targets, negatives)
    streams = [
        (f_n, targets.node_pos_rows, neg_rows[0]),
        (f_p, targets.edge_pos_rows, neg_rows[1]),
        (f_t, targets.trip_pos_rows, neg_rows[2]),
    ]
    loss = 0.0
    parts = []
    dfeats = []
    for weight, (feats, pos_lists, neg_lists) in zip(cc.stream_weights, streams):
        count = feats.shape[0]
        if count == 0:
            parts.append(0.0)
            dfeats.append(np.zeros_like(feats))
            continue
        pos, dpos = _stream_terms(feats, pos_lists, targets.matrix, positive=True)
        neg, dneg = _stream_terms(feats, neg_lists, targets.matrix, positive=False, tau=cc.negative_margin)
        stream_loss = (pos + cc.negative_weight * neg) / count
        parts.append(stream_loss)
        loss += weight * stream_loss
        dfeats.append((dpos + cc.negative_weight * dneg) * (weight / count))
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite pre-training loss on scene {prepared.scene.scene_id!r}: parts={parts}")
    if not want_grads:
        return loss, parts, None
    dX, dEp, grads = _project_backward(dfeats[0], dfeats[1], dfeats[2], proj_cache, params, specs)
    accumulate_grads(grads, backbone_backward(dX, dEp, bb_cache, prepared.sets, params, config))
    return loss, parts, grads


def pretrain_step(
    batch: list[PreparedScene],
    params: Params,
    table: EmbeddingTable,
    config: EncoderConfig,
    pre: PretrainConfig,
    vocabulary: LabelVocabulary,
    rng: np.random.Generator,
):
    """Loss and gradients for one batch; negatives are sampled per call."""
    total = 0.0
    parts_sum = np.zeros(3)
    grads: Params = {}
    for prepared in batch:
        if prepared.targets is None:
            prepared.targets = bind_scene_targets(prepared.keys, table, vocabulary)
        negatives = prepared.targets.sampler.sample(pre.contrastive.num_negatives, rng)
        loss, parts, scene_grads = _scene_loss_and_grads(prepared, params, config, pre, negatives)
        total += loss
        parts_sum += parts
        accumulate_grads(grads, scene_grads)
    scale = 1.0 / len(batch)
    for g in grads.values():
        g *= scale
    return total * scale, grads, parts_sum * scale


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]


def _write_history_line(out_dir: Path | None, record: dict) -> None:
    if out_dir is not None:
        with open(out_dir / "log.jsonl", "a") as fh:
            fh.write(json.dumps(record) + "\n")


def pretrain(
    scenes: list[Scene],
    vocabulary: LabelVocabulary,
    table: EmbeddingTable,
    config: EncoderConfig,
    pre: PretrainConfig,
    out_dir: str | Path | None = None,
    quiet: bool = True,
) -> TrainResult:
    """Full pre-training loop; deterministic given `pre.seed`."""
    if not scenes:
        raise ValueError("dataset must be nonempty")
    out_dir = Path(out_dir) if out_dir is not None else None
    params: Params = {}
    params.update(init_backbone_params(config, rng_for(pre.seed, "init-backbone")))
    params.update(init_projector_params(config, pre, rng_for(pre.seed, "init-projectors")))
    prepared = [prepare_scene(s, config, table, vocabulary) for s in scenes]
    state = AdamState(pre.base_lr)
    history: list[dict] = []
    fingerprint = pretrain_fingerprint(config, pre)
    for epoch in range(pre.epochs):
        lr = linear_lr(epoch, pre.epochs, pre.base_lr)
        order = rng_for(pre.seed, "shuffle", epoch).permutation(len(prepared))
        epoch_loss = 0.0
        epoch_parts = np.zeros(3)
        n_batches = 0
        for step, start in enumerate(range(0, len(prepared), pre.batch_size)):
            batch = [prepared[i] for i in order[start : start + pre.batch_size]]
            rng = rng_for(pre.seed, "negatives", epoch, step)
            loss, grads, parts = pretrain_step(batch, params, table, config, pre, vocabulary, rng)
            adam_step(state, params, grads, lr)
            epoch_loss += loss
            epoch_parts += parts
            n_batches += 1
        record = {
            "epoch": epoch,
            "lr": float(lr),
            "loss": float(epoch_loss / n_batches),
            "node_loss": float(epoch_parts[0] / n_batches),
            "edge_loss": float(epoch_parts[1] / n_batches),
            "triplet_loss": float(epoch_parts[2] / n_batches),
        }
        history.append(record)
        _write_history_line(out_dir, record)
        if not quiet:
            print(json.dumps(record))
        if out_dir is not None:
            save_checkpoint(Checkpoint(fingerprint, params, AdamSnapshot.of(state)), out_dir / "checkpoint_last.ckpt")
    checkpoint = Checkpoint(fingerprint, {k: v.copy() for k, v in params.items()}, AdamSnapshot.of(state))
    if out_dir is not None:
        save_checkpoint(checkpoint, out_dir / "checkpoint_final.ckpt")
    return TrainResult(checkpoint, history)
