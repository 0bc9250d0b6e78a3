"""Feature-graph construction and the triplet message-passing GCN.

Each instance becomes a node encoded from its centered (x,y,z,r,g,b) points
by a shared point encoder; each ordered instance pair becomes a directed
edge encoded from the points inside the pair's enclosing box with a 7th
membership channel (1 = subject, 2 = object, 0 = bystander). A GCN layer
feeds every (node, edge, node) triplet through g1, splits the result into
two node messages and the new edge feature, averages the messages each node
receives over all its incident directed edges, and applies a residual g2
update to the node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SceneValidationError
from .nn import (
    MlpSpec,
    Params,
    PointEncoderSpec,
    mlp_backward,
    mlp_forward,
    mlp_init,
    point_encoder_backward_segments,
    point_encoder_forward_segments,
    point_encoder_init,
)
from .scenes import Scene
from .seeding import rng_for


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 4
    feature_width: int = 256
    node_point_widths: tuple[int, ...] = (64, 128)
    edge_point_widths: tuple[int, ...] = (64, 128)
    node_point_cap: int = 512
    pair_point_cap: int = 1024
    pair_mask_channel: bool = True
    sample_seed: int = 0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.feature_width < 1:
            raise ValueError("feature_width must be >= 1")

    def node_encoder_spec(self) -> PointEncoderSpec:
        return PointEncoderSpec(6, (*self.node_point_widths, self.feature_width))

    def edge_encoder_spec(self) -> PointEncoderSpec:
        return PointEncoderSpec(7 if self.pair_mask_channel else 6, (*self.edge_point_widths, self.feature_width))

    def g1_spec(self) -> MlpSpec:
        w = 3 * self.feature_width
        return MlpSpec(w, (w,), ("relu",))

    def g2_spec(self) -> MlpSpec:
        w = self.feature_width
        return MlpSpec(w, (w,), ("relu",))

    def fingerprint(self) -> str:
        return (
            f"k={self.num_layers};F={self.feature_width};"
            f"node_widths={self.node_point_widths};edge_widths={self.edge_point_widths};"
            f"mask={int(self.pair_mask_channel)}"
        )


@dataclass
class FeatureGraph:
    node_features: np.ndarray  # n x F
    edge_index: np.ndarray     # E x 2 node positions, all ordered pairs
    edge_features: np.ndarray  # E x F
    instance_ids: list[int]    # node position -> instance id


def extract_instance_points(scene: Scene, instance_id: int) -> np.ndarray:
    """Instance points as N x 6, xyz translated so the bbox center is the origin."""
    inst = scene.instance_by_id(instance_id)
    pts = scene.points[inst.point_indices].astype(np.float32).copy()
    pts[:, :3] -= inst.bbox.center.astype(np.float32)
    return pts


def _enclosing_box(scene: Scene, i: int, j: int):
    a, b = scene.instance_by_id(i).bbox, scene.instance_by_id(j).bbox
    lo = np.minimum(a.lo, b.lo)
    hi = np.maximum(a.hi, b.hi)
    return lo, hi


def extract_pair_points(scene: Scene, i: int, j: int) -> np.ndarray:
    """Points inside the enclosing box of instances i and j, as N x 7.

    The 7th channel marks membership: 1 for points of i, 2 for points of j,
    0 for bystanders; xyz is centered on the enclosing box center.
    """
    if i == j:
        raise ValueError("pair extraction requires two distinct instances")
    lo, hi = _enclosing_box(scene, i, j)
    xyz = scene.points[:, :3]
    inside = np.all((xyz >= lo) & (xyz <= hi), axis=1)
    mask = np.zeros(scene.points.shape[0], dtype=np.float32)
    mask[scene.instance_by_id(i).point_indices] = 1.0
    mask[scene.instance_by_id(j).point_indices] = 2.0
    idx = np.flatnonzero(inside)
    pts = np.empty((idx.size, 7), dtype=np.float32)
    pts[:, :6] = scene.points[idx]
    pts[:, :3] -= ((lo + hi) / 2.0).astype(np.float32)
    pts[:, 6] = mask[idx]
    return pts


def _subsample(pts: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    if pts.shape[0] <= cap:
        return pts
    keep = np.sort(rng.choice(pts.shape[0], size=cap, replace=False))
    return pts[keep]


@dataclass
class ScenePointSets:
    """Precomputed, capped point sets for one scene (cacheable across epochs)."""

    node_points: np.ndarray   # concatenated instance point sets
    node_starts: np.ndarray
    pair_points: np.ndarray   # concatenated pair point sets (empty if n == 1)
    pair_starts: np.ndarray
    edge_index: np.ndarray    # E x 2 node positions
    instance_ids: list[int]


def build_point_sets(scene: Scene, config: EncoderConfig) -> ScenePointSets:
    instance_ids = [inst.id for inst in scene.instances]
    node_sets = []
    for iid in instance_ids:
        pts = extract_instance_points(scene, iid)
        rng = rng_for(config.sample_seed, "subsample-node", scene.scene_id, iid)
        node_sets.append(_subsample(pts, config.node_point_cap, rng))
    pair_sets = []
    edges = []
    for a, i in enumerate(instance_ids):
        for b, j in enumerate(instance_ids):
            if i == j:
                continue
            pts = extract_pair_points(scene, i, j)
            if not config.pair_mask_channel:
                pts = pts[:, :6]
            rng = rng_for(config.sample_seed, "subsample-pair", scene.scene_id, i, j)
            pair_sets.append(_subsample(pts, config.pair_point_cap, rng))
            edges.append((a, b))
    node_starts = np.cumsum([0] + [s.shape[0] for s in node_sets[:-1]]).astype(np.int64)
    if pair_sets:
        pair_starts = np.cumsum([0] + [s.shape[0] for s in pair_sets[:-1]]).astype(np.int64)
        pair_points = np.concatenate(pair_sets, axis=0)
        edge_index = np.array(edges, dtype=np.int64)
    else:
        pair_starts = np.zeros(0, dtype=np.int64)
        pair_points = np.zeros((0, 7 if config.pair_mask_channel else 6), dtype=np.float32)
        edge_index = np.zeros((0, 2), dtype=np.int64)
    return ScenePointSets(
        np.concatenate(node_sets, axis=0), node_starts, pair_points, pair_starts, edge_index, instance_ids
    )


def init_backbone_params(config: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> Params:
    params: Params = {}
    params.update(point_encoder_init(config.node_encoder_spec(), rng, "enc_node.", dtype))
    params.update(point_encoder_init(config.edge_encoder_spec(), rng, "enc_edge.", dtype))
    for layer in range(config.num_layers):
        params.update(mlp_init(config.g1_spec(), rng, f"gcn{layer}.g1.", dtype))
        params.update(mlp_init(config.g2_spec(), rng, f"gcn{layer}.g2.", dtype))
    return params


def gcn_layer_forward(X: np.ndarray, Ep: np.ndarray, edge_index: np.ndarray, params: Params, config: EncoderConfig, layer: int):
    """One message-passing layer; returns (X', Ep', cache)."""
    F = config.feature_width
    n = X.shape[0]
    if Ep.shape[0] == 0:
        return X, Ep, ("empty", X.dtype)
    src, dst = edge_index[:, 0], edge_index[:, 1]
    T = np.concatenate([X[src], Ep, X[dst]], axis=1)
    H, g1_cache = mlp_forward(config.g1_spec(), params, T, f"gcn{layer}.g1.")
    psi_src, Ep_new, psi_dst = H[:, :F], H[:, F : 2 * F], H[:, 2 * F :]

    counts = np.bincount(src, minlength=n) + np.bincount(dst, minlength=n)
    S = np.zeros_like(X)
    np.add.at(S, src, psi_src)
    np.add.at(S, dst, psi_dst)
    active = counts > 0
    rho = S[active] / counts[active, None].astype(X.dtype)
    G, g2_cache = mlp_forward(config.g2_spec(), params, rho, f"gcn{layer}.g2.")
    X_new = X.copy()
    X_new[active] += G
    cache = (g1_cache, g2_cache, src, dst, counts, active)
    return X_new, np.ascontiguousarray(Ep_new), cache


def gcn_layer_backward(dX_new: np.ndarray, dEp_new: np.ndarray, cache, params: Params, config: EncoderConfig, layer: int):
    """Returns (dX, dEp, grads) for one layer."""
    if cache[0] == "empty":
        return dX_new, dEp_new, {}
    g1_cache, g2_cache, src, dst, counts, active = cache
    F = config.feature_width
    dX = dX_new.copy()
    dG = dX_new[active]
    drho, g2_grads = mlp_backward(config.g2_spec(), params, g2_cache, dG, f"gcn{layer}.g2.")
    dS_active = drho / counts[active, None].astype(dX_new.dtype)
    dS = np.zeros_like(dX_new)
    dS[active] = dS_active
    dpsi_src = dS[src]
    dpsi_dst = dS[dst]
    dH = np.concatenate([dpsi_src, dEp_new, dpsi_dst], axis=1)
    dT, g1_grads = mlp_backward(config.g1_spec(), params, g1_cache, dH, f"gcn{layer}.g1.")
    dEp = np.ascontiguousarray(dT[:, F : 2 * F])
    np.add.at(dX, src, dT[:, :F])
    np.add.at(dX, dst, dT[:, 2 * F :])
    grads = {**g1_grads, **g2_grads}
    return dX, dEp, grads


def backbone_forward(sets: ScenePointSets, params: Params, config: EncoderConfig):
    """Point encoders + k GCN layers; returns (X, Ep, cache)."""
    dtype = params["enc_node.l0.W"].dtype
    node_pts = sets.node_points.astype(dtype, copy=False)
    X, node_cache = point_encoder_forward_segments(config.node_encoder_spec(), params, node_pts, sets.node_starts, "enc_node.")
    if sets.pair_points.shape[0]:
        pair_pts = sets.pair_points.astype(dtype, copy=False)
        Ep, edge_cache = point_encoder_forward_segments(config.edge_encoder_spec(), params, pair_pts, sets.pair_starts, "enc_edge.")
    else:
        Ep, edge_cache = np.zeros((0, config.feature_width), dtype=dtype), None
    layer_caches = []
    for layer in range(config.num_layers):
        X, Ep, cache = gcn_layer_forward(X, Ep, sets.edge_index, params, config, layer)
        layer_caches.append(cache)
    return X, Ep, (node_cache, edge_cache, layer_caches)


def backbone_backward(dX: np.ndarray, dEp: np.ndarray, cache, sets: ScenePointSets, params: Params, config: EncoderConfig) -> Params:
    node_cache, edge_cache, layer_caches = cache
    grads: Params = {}
    for layer in reversed(range(config.num_layers)):
        dX, dEp, layer_grads = gcn_layer_backward(dX, dEp, layer_caches[layer], params, config, layer)
        _merge_grads(grads, layer_grads)
    _merge_grads(grads, point_encoder_backward_segments(config.node_encoder_spec(), params, node_cache, dX, "enc_node."))
    if edge_cache is not None:
        _merge_grads(grads, point_encoder_backward_segments(config.edge_encoder_spec(), params, edge_cache, dEp, "enc_edge."))
    return grads


def _merge_grads(total: Params, part: Params) -> None:
    for name, g in part.items():
        if name in total:
            total[name] += g
        else:
            total[name] = g


def accumulate_grads(total: Params, part: Params) -> None:
    _merge_grads(total, part)


def encode_initial_graph(scene: Scene, params: Params, config: EncoderConfig) -> FeatureGraph:
    """Shared point encoders over instance and pair point sets, no GCN."""
    for inst in scene.instances:
        if inst.point_indices.size == 0:
            raise SceneValidationError(f"instance {inst.id} has no points")
    sets = build_point_sets(scene, config)
    X, _ = point_encoder_forward_segments(config.node_encoder_spec(), params, sets.node_points, sets.node_starts, "enc_node.")
    if sets.pair_points.shape[0]:
        Ep, _ = point_encoder_forward_segments(config.edge_encoder_spec(), params, sets.pair_points, sets.pair_starts, "enc_edge.")
    else:
        Ep = np.zeros((0, config.feature_width), dtype=X.dtype)
    return FeatureGraph(X, sets.edge_index, Ep, sets.instance_ids)


def gcn_layer(graph: FeatureGraph, params: Params, config: EncoderConfig, layer: int = 0) -> FeatureGraph:
    X, Ep, _ = gcn_layer_forward(graph.node_features, graph.edge_features, graph.edge_index, params, config, layer)
    return FeatureGraph(X, graph.edge_index, Ep, graph.instance_ids)


def encode(scene: Scene, params: Params, config: EncoderConfig) -> FeatureGraph:
    """Full backbone: initial feature graph refined by k GCN layers."""
    sets = build_point_sets(scene, config)
    X, Ep, _ = backbone_forward(sets, params, config)
    return FeatureGraph(X, sets.edge_index, Ep, sets.instance_ids)
