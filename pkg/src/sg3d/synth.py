"""Synthetic indoor scenes with geometry-derived ground-truth relationships.

Objects are sampled from a small catalog of shape/size/color prototypes so
class labels are learnable from the point cloud alone. Every relationship
is re-derivable from bounding-box geometry via `derive_predicates`, which
keeps the ground truth exactly reproducible.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError
from .scenes import Aabb, Instance, Relationship, Scene, bbox_of, validate_scene
from .seeding import rng_for

PRED_STANDING_ON = "standing on"
PRED_CLOSE_BY = "close by"
PRED_BIGGER_THAN = "bigger than"
PRED_SMALLER_THAN = "smaller than"
PRED_HIGHER_THAN = "higher than"


@dataclass(frozen=True)
class PredicateRules:
    """Thresholds for the geometric predicate rules (meters / ratios)."""

    support_gap: float = 0.01          # bottom-to-top contact tolerance
    support_overlap: float = 0.5       # min xy footprint overlap fraction
    proximity_distance: float = 0.5    # centroid distance for "close by"
    volume_ratio: float = 2.0          # bbox volume ratio for bigger/smaller
    clearance: float = 0.05            # vertical gap for "higher than"
    standing_on: bool = True
    close_by: bool = True
    bigger_than: bool = True
    smaller_than: bool = True
    higher_than: bool = True

    def enabled_predicates(self) -> tuple[str, ...]:
        pairs = [
            (self.standing_on, PRED_STANDING_ON),
            (self.close_by, PRED_CLOSE_BY),
            (self.bigger_than, PRED_BIGGER_THAN),
            (self.smaller_than, PRED_SMALLER_THAN),
            (self.higher_than, PRED_HIGHER_THAN),
        ]
        return tuple(name for on, name in pairs if on)


# label -> (shape, (w, d, h) meters, (r, g, b)); sizes get per-object jitter
CATALOG: dict[str, tuple[str, tuple[float, float, float], tuple[float, float, float]]] = {
    "table": ("box", (1.40, 0.80, 0.72), (0.55, 0.36, 0.20)),
    "chair": ("box", (0.45, 0.45, 0.90), (0.72, 0.52, 0.30)),
    "sofa": ("box", (1.85, 0.90, 0.80), (0.35, 0.38, 0.60)),
    "bed": ("box", (1.95, 1.55, 0.55), (0.80, 0.78, 0.72)),
    "shelf": ("box", (0.85, 0.30, 1.80), (0.42, 0.28, 0.18)),
    "monitor": ("box", (0.55, 0.06, 0.35), (0.10, 0.10, 0.12)),
    "box": ("box", (0.40, 0.40, 0.40), (0.62, 0.50, 0.35)),
    "lamp": ("cylinder", (0.16, 0.16, 1.30), (0.85, 0.82, 0.55)),
    "plant": ("cylinder", (0.32, 0.32, 0.85), (0.18, 0.55, 0.22)),
    "ball": ("sphere", (0.26, 0.26, 0.26), (0.80, 0.20, 0.18)),
}

DEFAULT_LABELS = tuple(CATALOG)

# objects that may be placed on top of these supports
SUPPORT_LABELS = ("table", "shelf", "box", "bed")
STACKABLE_LABELS = ("lamp", "plant", "monitor", "ball", "box")


@dataclass(frozen=True)
class GenConfig:
    rng_seed: int = 0
    num_objects: tuple[int, int] = (4, 9)
    room_extent: tuple[float, float, float] = (6.0, 6.0, 3.0)
    points_per_object: tuple[int, int] = (90, 160)
    label_pool: tuple[str, ...] = DEFAULT_LABELS
    label_mode: str = "uniform"  # "uniform" | "roundrobin"
    stack_probability: float = 0.35
    size_jitter: float = 0.2
    color_jitter: float = 0.05
    max_place_attempts: int = 200
    rules: PredicateRules = field(default_factory=PredicateRules)

    def __post_init__(self):
        if not (1 <= self.num_objects[0] <= self.num_objects[1]):
            raise ValueError("num_objects range must be nonempty and >= 1")
        if not (1 <= self.points_per_object[0] <= self.points_per_object[1]):
            raise ValueError("points_per_object range must be nonempty")
        if min(self.room_extent) <= 0:
            raise ValueError("room extent must be positive")
        if not self.label_pool:
            raise ValueError("label pool must be nonempty")
        if self.label_mode not in ("uniform", "roundrobin"):
            raise ValueError(f"unknown label_mode {self.label_mode!r}")
        unknown = [l for l in self.label_pool if l not in CATALOG]
        if unknown:
            raise ValueError(f"labels not in catalog: {unknown}")


def _sample_box_surface(rng: np.random.Generator, n: int, size: np.ndarray) -> np.ndarray:
    w, d, h = size
    areas = np.array([d * h, d * h, w * h, w * h, w * d, w * d])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 2))
    pts = np.empty((n, 3))
    for i, f in enumerate(faces):
        if f < 2:  # +-x faces
            pts[i] = [(0.5 if f == 0 else -0.5) * w, u[i, 0] * d, (u[i, 1] + 0.5) * h]
        elif f < 4:  # +-y faces
            pts[i] = [u[i, 0] * w, (0.5 if f == 2 else -0.5) * d, (u[i, 1] + 0.5) * h]
        else:  # top/bottom
            pts[i] = [u[i, 0] * w, u[i, 1] * d, h if f == 4 else 0.0]
    return pts


def _sample_cylinder_surface(rng: np.random.Generator, n: int, size: np.ndarray) -> np.ndarray:
    radius, height = size[0] / 2.0, size[2]
    side_area = 2 * np.pi * radius * height
    cap_area = np.pi * radius**2
    which = rng.choice(3, size=n, p=np.array([side_area, cap_area, cap_area]) / (side_area + 2 * cap_area))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    for i, w in enumerate(which):
        if w == 0:
            z = rng.uniform(0, height)
            pts[i] = [radius * np.cos(theta[i]), radius * np.sin(theta[i]), z]
        else:
            r = radius * np.sqrt(rng.uniform())
            pts[i] = [r * np.cos(theta[i]), r * np.sin(theta[i]), height if w == 1 else 0.0]
    return pts


def _sample_sphere_surface(rng: np.random.Generator, n: int, size: np.ndarray) -> np.ndarray:
    radius = size[0] / 2.0
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    pts = v * radius
    pts[:, 2] += radius  # rest on z=0
    return pts


_SAMPLERS = {"box": _sample_box_surface, "cylinder": _sample_cylinder_surface, "sphere": _sample_sphere_surface}


@dataclass
class _Placed:
    label: str
    shape: str
    size: np.ndarray      # (w, d, h)
    origin: np.ndarray    # (x, y, z) of footprint center at object bottom
    color: np.ndarray
    support: int | None   # index of the object it stands on

    @property
    def box(self) -> Aabb:
        half = np.array([self.size[0] / 2, self.size[1] / 2, 0.0])
        lo = self.origin - half
        hi = self.origin + half + np.array([0.0, 0.0, self.size[2]])
        return Aabb(lo, hi)


def _boxes_overlap_xy(a: Aabb, b: Aabb, margin: float = 0.02) -> bool:
    return bool(np.all(a.lo[:2] < b.hi[:2] + margin) and np.all(b.lo[:2] < a.hi[:2] + margin))


def _boxes_overlap_3d(a: Aabb, b: Aabb, margin: float = 0.02) -> bool:
    return bool(np.all(a.lo < b.hi + margin) and np.all(b.lo < a.hi + margin))


def generate_scene(config: GenConfig, scene_id: str | None = None) -> Scene:
    """Generate a collision-free scene; deterministic given the config seed."""
    rng = rng_for(config.rng_seed, "synth", scene_id or "scene")
    n_objects = int(rng.integers(config.num_objects[0], config.num_objects[1] + 1))
    if config.label_mode == "roundrobin":
        labels = [config.label_pool[i % len(config.label_pool)] for i in range(n_objects)]
    else:
        labels = [str(rng.choice(config.label_pool)) for _ in range(n_objects)]
    # large footprints first: small objects still fit the remaining gaps
    labels.sort(key=lambda l: -CATALOG[l][1][0] * CATALOG[l][1][1])

    placed: list[_Placed] = []
    half_x, half_y = config.room_extent[0] / 2, config.room_extent[1] / 2
    for label in labels:
        shape, base_size, base_color = CATALOG[label]
        size = np.array(base_size) * rng.uniform(1 - config.size_jitter, 1 + config.size_jitter, size=3)
        color = np.clip(np.array(base_color) + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0)

        supports = [
            k for k, p in enumerate(placed)
            if p.label in SUPPORT_LABELS
            and label in STACKABLE_LABELS
            and p.size[0] >= size[0] * 1.15 and p.size[1] >= size[1] * 1.15
            and p.box.hi[2] + size[2] < config.room_extent[2]
            and p.support is None
        ]
        ok = False
        for _ in range(config.max_place_attempts):
            if supports and rng.uniform() < config.stack_probability:
                sup_idx = int(rng.choice(supports))
                sup = placed[sup_idx]
                slack = (sup.size[:2] - size[:2]) / 2
                xy = sup.origin[:2] + rng.uniform(-1, 1, size=2) * slack * 0.9
                origin = np.array([xy[0], xy[1], sup.box.hi[2]])
                candidate = _Placed(label, shape, size, origin, color, sup_idx)
                collides = any(
                    _boxes_overlap_3d(candidate.box, p.box)
                    for k, p in enumerate(placed)
                    if k != sup_idx
                )
                if not collides:
                    placed.append(candidate)
                    ok = True
                    break
            else:
                if size[0] > config.room_extent[0] or size[1] > config.room_extent[1]:
                    break  # cannot fit this footprint at all
                xy = rng.uniform(
                    [-half_x + size[0] / 2, -half_y + size[1] / 2],
                    [half_x - size[0] / 2, half_y - size[1] / 2],
                )
                candidate = _Placed(label, shape, size, np.array([xy[0], xy[1], 0.0]), color, None)
                if not any(_boxes_overlap_xy(candidate.box, p.box) for p in placed if p.support is None) and not any(
                    _boxes_overlap_3d(candidate.box, p.box) for p in placed
                ):
                    placed.append(candidate)
                    ok = True
                    break
        if not ok:
            if len(placed) >= config.num_objects[0]:
                break  # crowded room: settle for fewer objects, still >= the minimum
            raise GenerationError(
                f"placement failed for {label!r} after {config.max_place_attempts} attempts (seed {config.rng_seed})"
            )

    all_points = []
    instances = []
    offset = 0
    for idx, obj in enumerate(placed):
        n_pts = int(rng.integers(config.points_per_object[0], config.points_per_object[1] + 1))
        local = _SAMPLERS[obj.shape](rng, n_pts, obj.size)
        xyz = local + obj.origin
        rgb = np.clip(obj.color + rng.uniform(-config.color_jitter, config.color_jitter, size=(n_pts, 3)), 0.0, 1.0)
        all_points.append(np.concatenate([xyz, rgb], axis=1).astype(np.float32))
        indices = np.arange(offset, offset + n_pts, dtype=np.int64)
        instances.append(Instance(idx, obj.label, indices, bbox_of(xyz)))
        offset += n_pts

    points = np.concatenate(all_points, axis=0)
    scene = Scene(scene_id or f"synth-{config.rng_seed}", points, instances, [])
    scene.relationships = derive_predicates(scene, config.rules)
    violations = validate_scene(scene)
    if violations:  # would indicate a generator bug
        raise GenerationError(f"generated scene invalid (seed {config.rng_seed}): {violations}")
    return scene


def _xy_overlap_fraction(top: Aabb, base: Aabb) -> float:
    """Fraction of `top`'s xy footprint covered by `base`'s footprint."""
    lo = np.maximum(top.lo[:2], base.lo[:2])
    hi = np.minimum(top.hi[:2], base.hi[:2])
    inter = float(np.prod(np.maximum(hi - lo, 0.0)))
    area = float(np.prod(np.maximum(top.extent[:2], 1e-9)))
    return inter / area


def _stands_on(a: Aabb, b: Aabb, rules: PredicateRules) -> bool:
    if abs(a.lo[2] - b.hi[2]) > rules.support_gap:
        return False
    if _xy_overlap_fraction(a, b) < rules.support_overlap:
        return False
    # the stander's center must be above the support's; keeps the rule antisymmetric
    return a.center[2] > b.center[2]


def derive_predicates(scene: Scene, rules: PredicateRules) -> list[Relationship]:
    """Relationships implied by bbox geometry; a pure function of the scene."""
    rels: list[Relationship] = []
    boxes = {inst.id: inst.bbox for inst in scene.instances}
    ids = sorted(boxes)
    for a, b in itertools.permutations(ids, 2):
        ba, bb = boxes[a], boxes[b]
        standing = rules.standing_on and _stands_on(ba, bb, rules)
        if standing:
            # support contact is the salient relation for this direction;
            # size/height comparisons are suppressed on such edges
            rels.append(Relationship(a, b, PRED_STANDING_ON))
            continue
        if rules.close_by:
            dist = float(np.linalg.norm(ba.center - bb.center))
            if dist < rules.proximity_distance and not _stands_on(bb, ba, rules):
                rels.append(Relationship(a, b, PRED_CLOSE_BY))
        if rules.bigger_than and ba.volume() >= rules.volume_ratio * bb.volume():
            rels.append(Relationship(a, b, PRED_BIGGER_THAN))
        if rules.smaller_than and bb.volume() >= rules.volume_ratio * ba.volume():
            rels.append(Relationship(a, b, PRED_SMALLER_THAN))
        if rules.higher_than and ba.lo[2] >= bb.hi[2] + rules.clearance:
            rels.append(Relationship(a, b, PRED_HIGHER_THAN))
    rels.sort(key=lambda r: r.key())
    return rels
