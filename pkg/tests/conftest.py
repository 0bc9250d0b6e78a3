"""Shared fixtures: tiny configs and small deterministic scenes."""

from dataclasses import replace

import pytest

from sg3d.graph import EncoderConfig
from sg3d.pretrain import ContrastiveConfig, PretrainConfig
from sg3d.scenes import LabelVocabulary
from sg3d.seeding import spawn_seed
from sg3d.synth import DEFAULT_LABELS, GenConfig, PredicateRules, generate_scene

TINY_ENCODER = EncoderConfig(
    num_layers=2,
    feature_width=8,
    node_point_widths=(6,),
    edge_point_widths=(6,),
    node_point_cap=24,
    pair_point_cap=32,
)

TINY_PRETRAIN = PretrainConfig(
    epochs=2,
    batch_size=2,
    embed_dim=12,
    projector_hidden=10,
    seed=0,
    contrastive=ContrastiveConfig(num_negatives=4),
)


@pytest.fixture
def tiny_encoder() -> EncoderConfig:
    return TINY_ENCODER


@pytest.fixture
def tiny_pretrain() -> PretrainConfig:
    return TINY_PRETRAIN


@pytest.fixture
def vocabulary() -> LabelVocabulary:
    return LabelVocabulary(DEFAULT_LABELS, ("and",) + PredicateRules().enabled_predicates())


def make_scenes(count: int, seed: int, num_objects=(3, 5), points=(20, 30), **overrides) -> list:
    gen = GenConfig(num_objects=num_objects, points_per_object=points, **overrides)
    return [
        generate_scene(replace(gen, rng_seed=spawn_seed(seed, "scene", i)), scene_id=f"scene_{i:04d}")
        for i in range(count)
    ]


@pytest.fixture
def small_scene():
    return make_scenes(1, seed=42, num_objects=(3, 3))[0]


@pytest.fixture
def small_scenes():
    return make_scenes(4, seed=42)
