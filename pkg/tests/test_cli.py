"""End-to-end CLI flows on tiny configurations."""

import json
import os
from pathlib import Path

import pytest

from sg3d.cli import main
from sg3d.scenes import load_scene_collection
from sg3d.text import load_table

TINY_CONFIG = {
    "seed": 3,
    "generator": {"num_objects": [3, 4], "points_per_object": [20, 30]},
    "encoder": {
        "num_layers": 1,
        "feature_width": 8,
        "node_point_widths": [6],
        "edge_point_widths": [6],
        "node_point_cap": 24,
        "pair_point_cap": 32,
    },
    "pretrain": {"epochs": 2, "batch_size": 2, "embed_dim": 12, "projector_hidden": 10,
                 "contrastive": {"num_negatives": 4}},
    "finetune": {"epochs": 2, "batch_size": 2, "head_hidden": 6},
    "metrics": {"object_ks": [1, 5], "predicate_ks": [1, 3], "relationship_ks": [10]},
}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return str(path)


def _dataset(tmp_path, config_path, count=4, name="data"):
    out = tmp_path / name
    assert main(["gen-synthetic", "--config", config_path, "--out", str(out), "--count", str(count)]) == 0
    return out


def test_gen_synthetic_writes_dataset_and_snapshot(tmp_path, config_path):
    out = _dataset(tmp_path, config_path)
    scenes, vocab = load_scene_collection(out)
    assert len(scenes) == 4
    assert (out / "config_resolved.json").exists()
    assert (out / "vocab.json").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["count"] == 4


def test_gen_synthetic_rerun_identical_bytes(tmp_path, config_path):
    a = _dataset(tmp_path, config_path, name="a")
    b = _dataset(tmp_path, config_path, name="b")
    for rel in ["manifest.json", "vocab.json", "scenes/scene_0000.json", "scenes/scene_0000.pts"]:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_gen_synthetic_creates_missing_out_dir(tmp_path, config_path):
    out = tmp_path / "deep" / "nested" / "dir"
    assert main(["gen-synthetic", "--config", config_path, "--out", str(out), "--count", "1"]) == 0
    assert (out / "manifest.json").exists()


def test_gen_synthetic_requires_seed(tmp_path, config_path):
    doc = json.loads(Path(config_path).read_text())
    del doc["seed"]
    unseeded = tmp_path / "unseeded.json"
    unseeded.write_text(json.dumps(doc))
    code = main(["gen-synthetic", "--config", str(unseeded), "--out", str(tmp_path / "x"), "--count", "1"])
    assert code == 1


def test_unknown_config_key_fails_before_compute(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"seed": 1, "generator": {"num_objects": [3, 4], "wat": 1}}))
    assert main(["gen-synthetic", "--config", str(bad), "--out", str(tmp_path / "x"), "--count", "1"]) == 1
    assert not (tmp_path / "x" / "manifest.json").exists()


def test_build_stub_table_defaults_and_determinism(tmp_path, config_path):
    data = _dataset(tmp_path, config_path)
    t1, t2 = tmp_path / "t1.emb", tmp_path / "t2.emb"
    args = ["build-stub-table", "--vocab", str(data / "vocab.json"), "--dataset", str(data), "--seed", "5"]
    assert main(args + ["--out", str(t1)]) == 0
    assert main(args + ["--out", str(t2)]) == 0
    assert t1.read_bytes() == t2.read_bytes()
    table = load_table(t1)
    assert table.dim == 512  # default D
    assert "and" in table.entries
    assert table.provenance == "stub"


def test_build_stub_table_prompts_out_and_composites(tmp_path, config_path):
    data = _dataset(tmp_path, config_path)
    out = tmp_path / "t.emb"
    prompts = tmp_path / "sentences.txt"
    assert (
        main(
            [
                "build-stub-table", "--vocab", str(data / "vocab.json"), "--dataset", str(data),
                "--seed", "5", "--dim", "16", "--out", str(out), "--prompts-out", str(prompts),
                "--composite", "cozy corner=sofa+lamp", "--extra-prompts", "kitchen,bathroom",
            ]
        )
        == 0
    )
    table = load_table(out)
    assert table.dim == 16
    assert "cozy corner" in table.entries and "kitchen" in table.entries
    lines = prompts.read_text().splitlines()
    assert lines and all(line.startswith("A scene of a ") for line in lines)


def _full_pipeline(tmp_path, config_path):
    data = _dataset(tmp_path, config_path)
    table = tmp_path / "table.emb"
    main(["build-stub-table", "--vocab", str(data / "vocab.json"), "--dataset", str(data),
          "--seed", "5", "--dim", "12", "--out", str(table)])
    pre_dir = tmp_path / "pre"
    assert main(["pretrain", "--config", config_path, "--dataset", str(data), "--table", str(table),
                 "--out", str(pre_dir)]) == 0
    ft_dir = tmp_path / "ft"
    assert main(["finetune", "--config", config_path, "--dataset", str(data),
                 "--init-checkpoint", str(pre_dir / "checkpoint_final.ckpt"), "--out", str(ft_dir)]) == 0
    return data, table, pre_dir, ft_dir


def test_training_pipeline_and_artifacts(tmp_path, config_path):
    data, table, pre_dir, ft_dir = _full_pipeline(tmp_path, config_path)
    for out_dir in (pre_dir, ft_dir):
        assert (out_dir / "config_resolved.json").exists()
        assert (out_dir / "log.jsonl").exists()
        assert (out_dir / "checkpoint_final.ckpt").exists()
        records = [json.loads(l) for l in (out_dir / "log.jsonl").read_text().splitlines()]
        assert len(records) == 2
        assert {"epoch", "lr", "loss"} <= set(records[0])

    eval_dir = tmp_path / "eval"
    assert main(["eval", "--config", config_path, "--dataset", str(data),
                 "--checkpoint", str(ft_dir / "checkpoint_final.ckpt"), "--out", str(eval_dir)]) == 0
    report = (eval_dir / "report.txt").read_text()
    assert "object_recall@1" in report and "predicate_recall@1" in report
    assert (eval_dir / "per_class.csv").read_text().startswith("kind,label,k,recall")

    scene_path = data / "scenes" / "scene_0000.json"
    zs_out = tmp_path / "zs.json"
    assert main(["zero-shot", "--config", config_path, "--scene", str(scene_path),
                 "--checkpoint", str(pre_dir / "checkpoint_final.ckpt"), "--table", str(table),
                 "--queries", "table,ball", "--out", str(zs_out)]) == 0
    zs = json.loads(zs_out.read_text())
    assert zs["label"] in ("table", "ball")
    assert set(zs["cosines"]) == {"table", "ball"}

    dump = tmp_path / "feats.csv"
    assert main(["dump-features", "--config", config_path, "--dataset", str(data),
                 "--checkpoint", str(ft_dir / "checkpoint_final.ckpt"), "--out", str(dump)]) == 0
    rows = dump.read_text().splitlines()
    assert any(r.startswith("node,") for r in rows) and any(r.startswith("edge,") for r in rows)
    n_values = len(rows[0].split(",")) - 4
    assert n_values == TINY_CONFIG["encoder"]["feature_width"]

    dump_proj = tmp_path / "feats_proj.csv"
    assert main(["dump-features", "--config", config_path, "--scene", str(scene_path),
                 "--checkpoint", str(pre_dir / "checkpoint_final.ckpt"), "--space", "projected",
                 "--dim", "12", "--out", str(dump_proj)]) == 0
    assert len(dump_proj.read_text().splitlines()[0].split(",")) - 4 == 12


def test_eval_rejects_pretrain_checkpoint(tmp_path, config_path):
    data, table, pre_dir, ft_dir = _full_pipeline(tmp_path, config_path)
    code = main(["eval", "--config", config_path, "--dataset", str(data),
                 "--checkpoint", str(pre_dir / "checkpoint_final.ckpt"), "--out", str(tmp_path / "bad")])
    assert code == 1


def test_eval_requires_checkpoint_flag(tmp_path, config_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--config", config_path, "--dataset", "x", "--out", "y"])
    assert exc.value.code == 2


def test_zero_shot_missing_query_prompt_fails(tmp_path, config_path):
    data, table, pre_dir, _ = _full_pipeline(tmp_path, config_path)
    scene_path = data / "scenes" / "scene_0000.json"
    code = main(["zero-shot", "--config", config_path, "--scene", str(scene_path),
                 "--checkpoint", str(pre_dir / "checkpoint_final.ckpt"), "--table", str(table),
                 "--queries", "table,unknown-room"])
    assert code == 1


def test_out_dir_env_override(tmp_path, config_path, monkeypatch):
    target = tmp_path / "from-env"
    monkeypatch.setenv("SG3D_OUT_DIR", str(target))
    assert main(["gen-synthetic", "--config", config_path, "--out", str(tmp_path / "ignored"), "--count", "1"]) == 0
    assert (target / "manifest.json").exists()
    assert not (tmp_path / "ignored").exists()


def test_default_config_matches_reference_hyperparameters():
    from sg3d.cli import RunConfig

    cfg = RunConfig()
    assert cfg.pretrain.epochs == 50
    assert cfg.pretrain.batch_size == 6
    assert cfg.pretrain.base_lr == 1e-3
    assert cfg.pretrain.embed_dim == 512
    assert cfg.pretrain.projector_hidden == 1024
    assert cfg.pretrain.contrastive.num_negatives == 16
    assert cfg.pretrain.contrastive.negative_margin == 0.5
    assert cfg.pretrain.contrastive.negative_weight == 1.0
    assert cfg.finetune.lr == 1e-4
    assert cfg.finetune.batch_size == 4
    assert cfg.finetune.epochs == 20
    assert cfg.finetune.lambda_obj == 0.1
    assert cfg.finetune.lambda_pred == 1.0
    assert cfg.finetune.head_hidden == 512
    assert cfg.encoder.num_layers == 4
    assert cfg.encoder.feature_width == 256
    assert cfg.metrics.object_ks == (1, 5, 10)
    assert cfg.metrics.predicate_ks == (1, 3, 5)
    assert cfg.metrics.relationship_ks == (50, 100)


def test_build_stub_table_rejects_vocab_without_and(tmp_path):
    bad_vocab = tmp_path / "vocab.json"
    bad_vocab.write_text(json.dumps({"object_labels": ["chair"], "predicate_labels": ["near"]}))
    code = main(["build-stub-table", "--vocab", str(bad_vocab), "--seed", "1", "--out", str(tmp_path / "t.emb")])
    assert code == 1


def test_pretrain_same_seed_bit_identical_checkpoints(tmp_path, config_path):
    data = _dataset(tmp_path, config_path)
    table = tmp_path / "table.emb"
    main(["build-stub-table", "--vocab", str(data / "vocab.json"), "--dataset", str(data),
          "--seed", "5", "--dim", "12", "--out", str(table)])
    for name in ("runA", "runB"):
        assert main(["pretrain", "--config", config_path, "--dataset", str(data), "--table", str(table),
                     "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "runA" / "checkpoint_final.ckpt").read_bytes()
    b = (tmp_path / "runB" / "checkpoint_final.ckpt").read_bytes()
    assert a == b
