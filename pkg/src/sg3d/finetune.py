"""Supervised fine-tuning with classification heads.

Projectors are discarded; an object head (softmax + cross entropy) and a
predicate head (independent sigmoids + per-class binary cross entropy)
are trained on top of the backbone. Relation-free edges are supervised
with the neutral "and" class so the predicate targets are never empty.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, TrainingError
from .graph import EncoderConfig, Params, accumulate_grads, backbone_backward, backbone_forward, init_backbone_params
from .nn import (
    AdamSnapshot,
    AdamState,
    Checkpoint,
    MlpSpec,
    adam_step,
    bn_running_stat_names,
    linear_lr,
    mlp_backward,
    mlp_forward,
    mlp_init,
    save_checkpoint,
)
from .pretrain import PreparedScene, prepare_scene
from .scenes import NEUTRAL_PREDICATE, LabelVocabulary, Scene
from .seeding import rng_for

PROB_EPS = 1e-7  # clamp for log() in both losses


@dataclass(frozen=True)
class FinetuneConfig:
    lambda_obj: float = 0.1
    lambda_pred: float = 1.0
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 20
    head_hidden: int = 512
    freeze_backbone: bool = False
    keep_projectors: bool = False  # carry frozen projectors for feature dumps
    seed: int = 0

    def __post_init__(self):
        if self.lambda_obj < 0 or self.lambda_pred < 0:
            raise ValueError("loss weights must be >= 0")


def head_specs(config: EncoderConfig, cfg: FinetuneConfig, n_objects: int, n_predicates: int) -> dict[str, MlpSpec]:
    F, H = config.feature_width, cfg.head_hidden
    make = lambda n: MlpSpec(F, (H, n), ("relu", "identity"), (True, False))
    return {"head_obj.": make(n_objects), "head_pred.": make(n_predicates)}


def init_head_params(config: EncoderConfig, cfg: FinetuneConfig, n_objects: int, n_predicates: int, rng) -> Params:
    params: Params = {}
    for prefix, spec in head_specs(config, cfg, n_objects, n_predicates).items():
        params.update(mlp_init(spec, rng, prefix))
    return params


def finetune_fingerprint(config: EncoderConfig, cfg: FinetuneConfig, n_objects: int, n_predicates: int) -> str:
    return f"finetune|{config.fingerprint()}|obj={n_objects}|pred={n_predicates}|hidden={cfg.head_hidden}"


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(logits: np.ndarray) -> np.ndarray:
    out = np.empty_like(logits)
    pos = logits >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-logits[pos]))
    ez = np.exp(logits[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def classify_nodes(node_features: np.ndarray, params: Params, spec: MlpSpec, train: bool = False) -> np.ndarray:
    """Per-node class probabilities (softmax rows)."""
    logits, _ = mlp_forward(spec, params, node_features, "head_obj.", train=train, update_running=False)
    return _softmax(logits)


def classify_edges(edge_features: np.ndarray, params: Params, spec: MlpSpec, train: bool = False) -> np.ndarray:
    """Per-edge independent predicate probabilities (elementwise sigmoid)."""
    logits, _ = mlp_forward(spec, params, edge_features, "head_pred.", train=train, update_running=False)
    return _sigmoid(logits)


def edge_target_multihot(predicates: list[list[str]], vocabulary: LabelVocabulary, dtype=np.float32) -> np.ndarray:
    """Multi-hot edge targets; relation-free edges get the "and" class."""
    n_pred = len(vocabulary.predicate_labels)
    target = np.zeros((len(predicates), n_pred), dtype=dtype)
    for e, preds in enumerate(predicates):
        effective = preds if preds else [NEUTRAL_PREDICATE]
        for p in effective:
            target[e, vocabulary.predicate_index(p)] = 1.0
    return target


def finetune_loss(
    node_probs: np.ndarray,
    edge_probs: np.ndarray,
    node_targets: np.ndarray,
    edge_targets: np.ndarray,
    cfg: FinetuneConfig,
) -> float:
    """lambda_obj * CE(nodes) + lambda_pred * BCE(edges, per class)."""
    ce = _ce_terms(node_probs, node_targets)[0] if node_probs.shape[0] else 0.0
    bce = _bce_terms(edge_probs, edge_targets)[0] if edge_probs.shape[0] else 0.0
    loss = cfg.lambda_obj * ce + cfg.lambda_pred * bce
    if not np.isfinite(loss):
        raise TrainingError("non-finite fine-tuning loss")
    return float(loss)


def _ce_terms(probs: np.ndarray, targets: np.ndarray):
    n = probs.shape[0]
    picked = probs[np.arange(n), targets]
    clamped = np.maximum(picked, PROB_EPS)
    loss = float(-np.log(clamped).mean())
    dprobs = np.zeros_like(probs)
    live = picked > PROB_EPS
    dprobs[np.arange(n)[live], targets[live]] = -1.0 / (n * picked[live])
    return loss, dprobs


def _bce_terms(probs: np.ndarray, targets: np.ndarray):
    p = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    loss = float(-(targets * np.log(p) + (1 - targets) * np.log(1 - p)).mean())
    inside = (probs > PROB_EPS) & (probs < 1.0 - PROB_EPS)
    dprobs = np.where(inside, (-targets / p + (1 - targets) / (1 - p)) / probs.size, 0.0).astype(probs.dtype)
    return loss, dprobs


def _softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    inner = (dprobs * probs).sum(axis=1, keepdims=True)
    return probs * (dprobs - inner)


def _scene_loss_and_grads(prepared: PreparedScene, params, specs, config, cfg, node_targets, edge_targets, train=True):
    X, Ep, bb_cache = backbone_forward(prepared.sets, params, config)
    obj_logits, obj_cache = mlp_forward(specs["head_obj."], params, X, "head_obj.", train=train)
    node_probs = _softmax(obj_logits)
    ce, dnode_probs = _ce_terms(node_probs, node_targets)
    dobj_logits = _softmax_backward(node_probs, dnode_probs) * cfg.lambda_obj
    dX, grads = mlp_backward(specs["head_obj."], params, obj_cache, dobj_logits, "head_obj.")

    bce = 0.0
    if Ep.shape[0]:
        pred_logits, pred_cache = mlp_forward(specs["head_pred."], params, Ep, "head_pred.", train=train)
        edge_probs = _sigmoid(pred_logits)
        bce, dedge_probs = _bce_terms(edge_probs, edge_targets)
        dpred_logits = dedge_probs * edge_probs * (1 - edge_probs) * cfg.lambda_pred
        dEp, pred_grads = mlp_backward(specs["head_pred."], params, pred_cache, dpred_logits, "head_pred.")
        accumulate_grads(grads, pred_grads)
    else:
        dEp = np.zeros_like(Ep)
    loss = cfg.lambda_obj * ce + cfg.lambda_pred * bce
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite fine-tuning loss on scene {prepared.scene.scene_id!r}")
    accumulate_grads(grads, backbone_backward(dX, dEp, bb_cache, prepared.sets, params, config))
    return loss, grads


def backbone_params_from_checkpoint(ckpt: Checkpoint, config: EncoderConfig) -> Params:
    """Extract backbone parameters, verifying the architecture fingerprint."""
    marker = f"|{config.fingerprint()}|"
    if marker not in ckpt.fingerprint:
        raise CheckpointError(
            f"checkpoint backbone architecture mismatch: {ckpt.fingerprint!r} lacks {marker!r}"
        )
    return {
        k: v.copy() for k, v in ckpt.params.items() if k.startswith(("enc_node.", "enc_edge.", "gcn"))
    }


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    history: list[dict]


def finetune(
    scenes: list[Scene],
    vocabulary: LabelVocabulary,
    pretrained: Checkpoint | None,
    config: EncoderConfig,
    cfg: FinetuneConfig,
    out_dir: str | Path | None = None,
    quiet: bool = True,
) -> FinetuneResult:
    """Supervised training; backbone from `pretrained` when given, fresh otherwise."""
    if not scenes:
        raise ValueError("dataset must be nonempty")
    out_dir = Path(out_dir) if out_dir is not None else None
    n_obj, n_pred = len(vocabulary.object_labels), len(vocabulary.predicate_labels)
    specs = head_specs(config, cfg, n_obj, n_pred)

    params: Params = {}
    if pretrained is not None:
        params.update(backbone_params_from_checkpoint(pretrained, config))
        if cfg.keep_projectors:
            # frozen by construction: the supervised loss never reaches them
            params.update({k: v.copy() for k, v in pretrained.params.items() if k.startswith("proj.")})
    else:
        params.update(init_backbone_params(config, rng_for(cfg.seed, "init-backbone")))
    params.update(init_head_params(config, cfg, n_obj, n_pred, rng_for(cfg.seed, "init-heads")))

    frozen_names = set()
    if cfg.freeze_backbone:
        frozen_names = {k for k in params if k.startswith(("enc_node.", "enc_edge.", "gcn"))}
    stat_names = set()
    for prefix, spec in specs.items():
        stat_names |= bn_running_stat_names(spec, prefix)

    prepared = []
    for scene in scenes:
        ps = prepare_scene(scene, config)
        node_targets = np.array([vocabulary.object_index(l) for l in ps.keys.node_labels], dtype=np.int64)
        edge_targets = edge_target_multihot(ps.keys.edge_predicates, vocabulary)
        prepared.append((ps, node_targets, edge_targets))

    state = AdamState(cfg.lr)
    history: list[dict] = []
    fingerprint = finetune_fingerprint(config, cfg, n_obj, n_pred)
    for epoch in range(cfg.epochs):
        lr = linear_lr(epoch, cfg.epochs, cfg.lr)
        order = rng_for(cfg.seed, "ft-shuffle", epoch).permutation(len(prepared))
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, len(prepared), cfg.batch_size):
            batch = [prepared[i] for i in order[start : start + cfg.batch_size]]
            grads: Params = {}
            loss = 0.0
            for ps, node_targets, edge_targets in batch:
                scene_loss, scene_grads = _scene_loss_and_grads(ps, params, specs, config, cfg, node_targets, edge_targets)
                loss += scene_loss
                accumulate_grads(grads, scene_grads)
            scale = 1.0 / len(batch)
            for name in list(grads):
                if name in frozen_names or name in stat_names:
                    del grads[name]
                else:
                    grads[name] *= scale
            adam_step(state, params, grads, lr)
            epoch_loss += loss * scale
            n_batches += 1
        record = {"epoch": epoch, "lr": float(lr), "loss": float(epoch_loss / n_batches)}
        history.append(record)
        if out_dir is not None:
            with open(out_dir / "log.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
            save_checkpoint(Checkpoint(fingerprint, params, AdamSnapshot.of(state)), out_dir / "checkpoint_last.ckpt")
        if not quiet:
            print(json.dumps(record))
    checkpoint = Checkpoint(fingerprint, {k: v.copy() for k, v in params.items()}, AdamSnapshot.of(state))
    if out_dir is not None:
        save_checkpoint(checkpoint, out_dir / "checkpoint_final.ckpt")
    return FinetuneResult(checkpoint, history)
