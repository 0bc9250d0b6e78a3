"""Command-line entry point and the run configuration schema.

One executable exposes the pipeline: `gen-synthetic`, `build-stub-table`,
`pretrain`, `finetune`, `eval`, `zero-shot`, and `dump-features`. Configs
are JSON with strict key checking; every training/eval run writes a
resolved-config snapshot next to its outputs. `SG3D_OUT_DIR` overrides the
output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import graph, metrics, pretrain as pretrain_mod, synth, text, zeroshot
from .errors import ConfigError, Sg3dError
from .finetune import FinetuneConfig, finetune
from .graph import EncoderConfig
from .nn import load_checkpoint
from .pretrain import ContrastiveConfig, PretrainConfig
from .scenes import LabelVocabulary, load_scene, load_scene_collection, write_scene_collection
from .seeding import spawn_seed
from .synth import GenConfig, PredicateRules
from .text import build_stub_table, enumerate_relationship_prompts, load_table, save_table


def _from_dict(cls, doc: dict, path: str):
    """Dataclass from a dict; unknown keys and tuple coercion handled strictly."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        if name == "rules":
            value = _from_dict(PredicateRules, value, f"{path}.rules")
        elif name == "contrastive":
            value = _from_dict(ContrastiveConfig, value, f"{path}.contrastive")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


@dataclasses.dataclass(frozen=True)
class MetricKs:
    object_ks: tuple[int, ...] = metrics.DEFAULT_OBJECT_KS
    predicate_ks: tuple[int, ...] = metrics.DEFAULT_PREDICATE_KS
    relationship_ks: tuple[int, ...] = metrics.DEFAULT_RELATIONSHIP_KS


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int | None = None
    generator: GenConfig = dataclasses.field(default_factory=GenConfig)
    encoder: EncoderConfig = dataclasses.field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = dataclasses.field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = dataclasses.field(default_factory=FinetuneConfig)
    metrics: MetricKs = dataclasses.field(default_factory=MetricKs)


_SECTIONS = {
    "generator": GenConfig,
    "encoder": EncoderConfig,
    "pretrain": PretrainConfig,
    "finetune": FinetuneConfig,
    "metrics": MetricKs,
}


def load_run_config(path: str | None, seed_flag: int | None = None) -> RunConfig:
    doc = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})")
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(doc) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    sections = {name: _from_dict(cls, doc.get(name, {}), name) for name, cls in _SECTIONS.items()}
    seed = seed_flag if seed_flag is not None else doc.get("seed")
    return RunConfig(seed=seed, **sections)


def resolved_config_dict(cfg: RunConfig) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def _require_seed(cfg: RunConfig) -> int:
    if cfg.seed is None:
        raise ConfigError("a seed is required for training commands (--seed or config 'seed')")
    return int(cfg.seed)


def _out_dir(args) -> Path:
    out = os.environ.get("SG3D_OUT_DIR") or args.out
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_snapshot(out_dir: Path, cfg: RunConfig, extra: dict | None = None) -> None:
    doc = resolved_config_dict(cfg)
    if extra:
        doc.update(extra)
    (out_dir / "config_resolved.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_gen_synthetic(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    seed = _require_seed(cfg)
    out_dir = _out_dir(args)
    scenes = []
    for i in range(args.count):
        scene_cfg = replace(cfg.generator, rng_seed=spawn_seed(seed, "scene", i))
        scenes.append(synth.generate_scene(scene_cfg, scene_id=f"scene_{i:04d}"))
    vocabulary = LabelVocabulary(
        tuple(cfg.generator.label_pool), tuple(sorted(set(cfg.generator.rules.enabled_predicates()) | {"and"}))
    )
    write_scene_collection(scenes, vocabulary, out_dir, seed)
    _write_snapshot(out_dir, cfg, {"command": "gen-synthetic", "count": args.count})
    print(f"wrote {len(scenes)} scenes to {out_dir}")
    return 0


def cmd_build_stub_table(args) -> int:
    vocabulary = LabelVocabulary.from_dict(json.loads(Path(args.vocab).read_text()))
    scenes, _ = load_scene_collection(args.dataset) if args.dataset else ([], None)
    sentences = enumerate_relationship_prompts(scenes, vocabulary)
    composites = {}
    for spec_str in args.composite or []:
        name, _, members = spec_str.partition("=")
        if not members:
            raise ConfigError(f"--composite expects name=member+member..., got {spec_str!r}")
        composites[name] = members.split("+")
    extra = [p for p in (args.extra_prompts.split(",") if args.extra_prompts else []) if p]
    table = build_stub_table(vocabulary, sentences, args.seed, args.dim, extra, composites)
    save_table(table, args.out)
    if args.prompts_out:
        Path(args.prompts_out).write_text("\n".join(sentences) + "\n")
    print(f"wrote table with {len(table.entries)} entries (D={table.dim}) to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    seed = _require_seed(cfg)
    scenes, vocabulary = load_scene_collection(args.dataset)
    table = load_table(args.table)
    out_dir = _out_dir(args)
    pre = replace(cfg.pretrain, seed=seed, embed_dim=table.dim)
    _write_snapshot(out_dir, replace(cfg, pretrain=pre), {"command": "pretrain", "dataset": args.dataset, "table": args.table})
    result = pretrain_mod.pretrain(scenes, vocabulary, table, cfg.encoder, pre, out_dir, quiet=False)
    print(f"final loss {result.history[-1]['loss']:.4f}; checkpoint at {out_dir / 'checkpoint_final.ckpt'}")
    return 0


def cmd_finetune(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    seed = _require_seed(cfg)
    scenes, vocabulary = load_scene_collection(args.dataset)
    out_dir = _out_dir(args)
    ft = replace(cfg.finetune, seed=seed)
    pretrained = load_checkpoint(args.init_checkpoint) if args.init_checkpoint else None
    _write_snapshot(
        out_dir,
        replace(cfg, finetune=ft),
        {"command": "finetune", "dataset": args.dataset, "init_checkpoint": args.init_checkpoint},
    )
    result = finetune(scenes, vocabulary, pretrained, cfg.encoder, ft, out_dir, quiet=False)
    print(f"final loss {result.history[-1]['loss']:.4f}; checkpoint at {out_dir / 'checkpoint_final.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    scenes, vocabulary = load_scene_collection(args.dataset)
    checkpoint = load_checkpoint(args.checkpoint)
    out_dir = _out_dir(args)
    report = metrics.evaluate(
        checkpoint,
        scenes,
        vocabulary,
        cfg.encoder,
        cfg.finetune,
        cfg.metrics.object_ks,
        cfg.metrics.predicate_ks,
        cfg.metrics.relationship_ks,
    )
    _write_snapshot(out_dir, cfg, {"command": "eval", "dataset": args.dataset, "checkpoint": args.checkpoint})
    rendered = metrics.render_report(report)
    (out_dir / "report.txt").write_text(rendered)
    (out_dir / "per_class.csv").write_text(metrics.per_class_csv(report))
    print(rendered, end="")
    return 0


def cmd_zero_shot(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    scene = load_scene(args.scene)
    checkpoint = load_checkpoint(args.checkpoint)
    table = load_table(args.table)
    labels = [q for q in args.queries.split(",") if q]
    queries = zeroshot.RoomQuerySet.from_table(labels, table)
    pre = replace(cfg.pretrain, embed_dim=table.dim)
    prediction = zeroshot.classify_scene_room(scene, checkpoint, queries, cfg.encoder, pre)
    print(f"scene {scene.scene_id}: {prediction.label}")
    for label in labels:
        print(f"  {label}: cosine={prediction.cosines[label]:+.4f} softmax={prediction.softmax_scores[label]:.4f}")
    if args.out:
        Path(args.out).write_text(
            json.dumps(
                {"scene_id": scene.scene_id, "label": prediction.label, "cosines": prediction.cosines,
                 "softmax": prediction.softmax_scores},
                indent=2,
            )
            + "\n"
        )
    return 0


def cmd_dump_features(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    checkpoint = load_checkpoint(args.checkpoint)
    if args.dataset:
        scenes, _ = load_scene_collection(args.dataset)
    else:
        scenes = [load_scene(args.scene)]
    rows = []
    pre = cfg.pretrain
    for scene in scenes:
        g = graph.encode(scene, checkpoint.params, cfg.encoder)
        if args.space == "projected":
            f_n, f_p, _ = pretrain_mod.project(g, checkpoint.params, cfg.encoder, replace(pre, embed_dim=args.dim or pre.embed_dim))
            node_feats, edge_feats = f_n, f_p
        else:
            node_feats, edge_feats = g.node_features, g.edge_features
        for pos, iid in enumerate(g.instance_ids):
            values = ",".join(f"{v:.6g}" for v in node_feats[pos])
            rows.append(f"node,{scene.scene_id},{iid},,{values}")
        for e, (a, b) in enumerate(g.edge_index):
            values = ",".join(f"{v:.6g}" for v in edge_feats[e])
            rows.append(f"edge,{scene.scene_id},{g.instance_ids[a]},{g.instance_ids[b]},{values}")
    Path(args.out).write_text("\n".join(rows) + "\n")
    print(f"wrote {len(rows)} feature rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sg3d", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, seed=True):
        if config:
            p.add_argument("--config", help="JSON run config (defaults used when omitted)")
        if seed:
            p.add_argument("--seed", type=int, help="global seed (overrides config)")

    p = sub.add_parser("gen-synthetic", help="generate a synthetic scene dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.set_defaults(fn=cmd_gen_synthetic)

    p = sub.add_parser("build-stub-table", help="write a stub-encoder LANGEMB1 table")
    p.add_argument("--vocab", required=True)
    p.add_argument("--dataset", help="dataset dir; its sentences are enumerated into the table")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=512)
    p.add_argument("--out", required=True)
    p.add_argument("--prompts-out", help="also write the enumerated sentence list (one per line)")
    p.add_argument("--extra-prompts", help="comma-separated extra prompts to include")
    p.add_argument("--composite", action="append", help="name=member+member... compositional query entry")
    p.set_defaults(fn=cmd_build_stub_table)

    p = sub.add_parser("pretrain", help="language-distillation pre-training")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--init-checkpoint", help="pre-trained backbone checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="recall metrics for a fine-tuned checkpoint")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("zero-shot", help="room-type query against a pre-trained checkpoint")
    common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--queries", required=True, help="comma-separated query prompts (must be in the table)")
    p.add_argument("--out", help="optional JSON output path")
    p.set_defaults(fn=cmd_zero_shot)

    p = sub.add_parser("dump-features", help="write node/edge features as CSV")
    common(p)
    p.add_argument("--dataset")
    p.add_argument("--scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--space", choices=("backbone", "projected"), default="backbone")
    p.add_argument("--dim", type=int, help="projected dim override (matches the training table)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_dump_features)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "dump-features" and not (args.dataset or args.scene):
        print("error: dump-features needs --dataset or --scene", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except (Sg3dError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
