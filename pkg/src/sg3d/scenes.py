"""Scene data model, on-disk format, validation, and subgraph splitting.

A scene on disk is a JSON metadata document plus a sidecar binary point
file. The metadata holds scene_id, the relative points_file path, the
instance list and the relationship list; the point file is
``L3DPTS1\\0`` + uint32 LE count + N x 6 float32 LE (x,y,z,r,g,b).
Serialization is canonical (instances sorted by id, relationships sorted by
(subject_id, object_id, predicate), stable JSON formatting) so round trips
are byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import SceneFormatError, SceneValidationError
from .seeding import rng_for

POINTS_MAGIC = b"L3DPTS1\x00"
NEUTRAL_PREDICATE = "and"


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned bounding box; lo/hi are (3,) float arrays."""

    lo: np.ndarray
    hi: np.ndarray

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2.0

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    def volume(self) -> float:
        return float(np.prod(np.maximum(self.extent, 0.0)))


def bbox_of(points_xyz: np.ndarray) -> Aabb:
    return Aabb(points_xyz.min(axis=0).astype(np.float64), points_xyz.max(axis=0).astype(np.float64))


@dataclass
class Instance:
    id: int
    label: str
    point_indices: np.ndarray  # sorted unique int64
    bbox: Aabb  # derived from the scene points at construction


@dataclass
class Relationship:
    subject_id: int
    object_id: int
    predicate: str

    def key(self) -> tuple:
        return (self.subject_id, self.object_id, self.predicate)


@dataclass
class Scene:
    """Immutable after construction; safe to share across workers."""

    scene_id: str
    points: np.ndarray  # N x 6 float32 (x,y,z,r,g,b)
    instances: list[Instance]
    relationships: list[Relationship]

    def instance_by_id(self, instance_id: int) -> Instance:
        for inst in self.instances:
            if inst.id == instance_id:
                return inst
        raise KeyError(f"unknown instance id {instance_id}")


@dataclass(frozen=True)
class LabelVocabulary:
    """Ordered object and predicate label sets; "and" must be a predicate."""

    object_labels: tuple[str, ...]
    predicate_labels: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.object_labels)) != len(self.object_labels):
            raise ValueError("object labels must be unique")
        if len(set(self.predicate_labels)) != len(self.predicate_labels):
            raise ValueError("predicate labels must be unique")
        if NEUTRAL_PREDICATE not in self.predicate_labels:
            raise ValueError(f'predicate vocabulary must contain "{NEUTRAL_PREDICATE}"')

    def object_index(self, label: str) -> int:
        return self.object_labels.index(label)

    def predicate_index(self, label: str) -> int:
        return self.predicate_labels.index(label)

    def to_dict(self) -> dict:
        return {
            "object_labels": list(self.object_labels),
            "predicate_labels": list(self.predicate_labels),
        }

    @staticmethod
    def from_dict(doc: dict) -> "LabelVocabulary":
        return LabelVocabulary(tuple(doc["object_labels"]), tuple(doc["predicate_labels"]))


def make_instance(instance_id: int, label: str, point_indices, points: np.ndarray) -> Instance:
    idx = np.asarray(point_indices, dtype=np.int64)
    if idx.size == 0:
        raise SceneValidationError(f"instance {instance_id}: empty point_indices")
    bbox = bbox_of(points[idx, :3])
    return Instance(int(instance_id), str(label), idx, bbox)


def validate_scene(scene: Scene, vocabulary: LabelVocabulary | None = None) -> list[str]:
    """Return violation descriptions; empty iff all invariants hold."""
    violations: list[str] = []
    n_points = scene.points.shape[0]
    if scene.points.ndim != 2 or scene.points.shape[1] != 6:
        violations.append(f"points: expected N x 6 array, got shape {scene.points.shape}")
        return violations
    if not np.all(np.isfinite(scene.points)):
        violations.append("points: non-finite values")
    colors = scene.points[:, 3:6]
    if colors.size and (colors.min() < -1e-6 or colors.max() > 1 + 1e-6):
        violations.append("points: color channels outside [0, 1]")

    if len(scene.instances) == 0:
        violations.append("instances: at least one instance required")

    seen_ids = set()
    claimed = np.zeros(n_points, dtype=bool)
    for inst in scene.instances:
        tag = f"instance {inst.id}"
        if inst.id < 0:
            violations.append(f"{tag}: id must be >= 0")
        if inst.id in seen_ids:
            violations.append(f"{tag}: duplicate id")
        seen_ids.add(inst.id)
        idx = inst.point_indices
        if idx.size == 0:
            violations.append(f"{tag}: point_indices empty")
            continue
        if np.any(idx < 0) or np.any(idx >= n_points):
            violations.append(f"{tag}: point_indices out of range [0, {n_points})")
            continue
        if np.any(np.diff(idx) <= 0):
            violations.append(f"{tag}: point_indices not sorted unique")
        overlap = claimed[idx]
        if overlap.any():
            violations.append(f"{tag}: disjointness violated, shares {int(overlap.sum())} points")
        claimed[idx] = True
        expect = bbox_of(scene.points[idx, :3])
        if not (np.allclose(expect.lo, inst.bbox.lo) and np.allclose(expect.hi, inst.bbox.hi)):
            violations.append(f"{tag}: bbox does not match point extents")

    for rel in scene.relationships:
        tag = f"relationship ({rel.subject_id}, {rel.predicate!r}, {rel.object_id})"
        if rel.subject_id == rel.object_id:
            violations.append(f"{tag}: self-relation")
        for endpoint in (rel.subject_id, rel.object_id):
            if endpoint not in seen_ids:
                violations.append(f"{tag}: references missing instance {endpoint}")
        if vocabulary is not None and rel.predicate not in vocabulary.predicate_labels:
            violations.append(f"{tag}: predicate not in vocabulary")
    return violations


def _read_points_file(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:8] != POINTS_MAGIC:
        raise SceneFormatError(f"{path}: bad point-file magic")
    (count,) = struct.unpack_from("<I", raw, 8)
    expected = 12 + count * 24
    if len(raw) != expected:
        raise SceneFormatError(f"{path}: expected {expected} bytes for {count} points, got {len(raw)}")
    pts = np.frombuffer(raw, dtype="<f4", offset=12).reshape(count, 6)
    return np.ascontiguousarray(pts)


def _write_points_file(path: Path, points: np.ndarray) -> None:
    pts = np.ascontiguousarray(points, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(POINTS_MAGIC)
        fh.write(struct.pack("<I", pts.shape[0]))
        fh.write(pts.tobytes())


def load_scene(path: str | Path) -> Scene:
    """Load and validate a scene; raises on malformed or inconsistent data."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: invalid JSON ({exc})") from exc
    required = {"scene_id", "points_file", "instances", "relationships"}
    if not isinstance(doc, dict) or set(doc) != required:
        raise SceneFormatError(f"{path}: top-level keys must be exactly {sorted(required)}")
    points = _read_points_file(path.parent / doc["points_file"])
    try:
        instances = [
            make_instance(item["id"], item["label"], item["point_indices"], points)
            for item in doc["instances"]
        ]
        relationships = [
            Relationship(int(item["subject_id"]), int(item["object_id"]), str(item["predicate"]))
            for item in doc["relationships"]
        ]
    except (KeyError, TypeError) as exc:
        raise SceneFormatError(f"{path}: malformed instance/relationship entry ({exc})") from exc
    scene = Scene(str(doc["scene_id"]), points, instances, relationships)
    violations = validate_scene(scene)
    if violations:
        raise SceneValidationError(f"{path}: " + "; ".join(violations))
    return scene


def scene_metadata_doc(scene: Scene, points_file: str) -> dict:
    instances = sorted(scene.instances, key=lambda i: i.id)
    relationships = sorted(scene.relationships, key=lambda r: r.key())
    return {
        "scene_id": scene.scene_id,
        "points_file": points_file,
        "instances": [
            {"id": inst.id, "label": inst.label, "point_indices": [int(i) for i in inst.point_indices]}
            for inst in instances
        ],
        "relationships": [
            {"subject_id": r.subject_id, "object_id": r.object_id, "predicate": r.predicate}
            for r in relationships
        ],
    }


def canonical_metadata_bytes(doc: dict) -> bytes:
    return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8")


def save_scene(scene: Scene, path: str | Path) -> None:
    """Write metadata JSON at `path` and the point file next to it."""
    path = Path(path)
    points_file = path.stem + ".pts"
    _write_points_file(path.parent / points_file, scene.points)
    path.write_bytes(canonical_metadata_bytes(scene_metadata_doc(scene, points_file)))


def split_scene(scene: Scene, max_objects: int, rng_seed: int) -> list[Scene]:
    """Split into connected neighborhoods of at most `max_objects` instances.

    Seeded random neighborhood sampling: pick a random uncovered instance,
    grow by nearest bbox-centroid distance (to any current member) until
    `max_objects`, repeat until every instance is covered. Neighborhoods may
    overlap; each split keeps exactly the relationships whose endpoints both
    survive in it.
    """
    if max_objects < 2:
        raise ValueError("max_objects must be >= 2")
    if len(scene.instances) <= max_objects:
        return [scene]

    rng = rng_for(rng_seed, "split", scene.scene_id)
    by_id = {inst.id: inst for inst in scene.instances}
    centroids = {inst.id: inst.bbox.center for inst in scene.instances}
    uncovered = set(by_id)
    groups: list[list[int]] = []
    while uncovered:
        seed_id = int(rng.choice(sorted(uncovered)))
        members = [seed_id]
        candidates = set(by_id) - {seed_id}
        while len(members) < max_objects and candidates:
            best = min(
                candidates,
                key=lambda cid: (
                    min(float(np.linalg.norm(centroids[cid] - centroids[m])) for m in members),
                    cid,
                ),
            )
            members.append(best)
            candidates.remove(best)
        groups.append(sorted(members))
        uncovered -= set(members)

    splits = []
    for k, members in enumerate(groups):
        member_set = set(members)
        new_points = []
        new_instances = []
        offset = 0
        for mid in members:
            inst = by_id[mid]
            pts = scene.points[inst.point_indices]
            new_points.append(pts)
            new_instances.append(
                Instance(mid, inst.label, np.arange(offset, offset + pts.shape[0], dtype=np.int64), inst.bbox)
            )
            offset += pts.shape[0]
        rels = [r for r in scene.relationships if r.subject_id in member_set and r.object_id in member_set]
        splits.append(
            Scene(f"{scene.scene_id}#split{k}", np.concatenate(new_points, axis=0), new_instances, rels)
        )
    return splits


def scene_vocabulary(scenes: list[Scene], extra_predicates: tuple[str, ...] = ()) -> LabelVocabulary:
    """Vocabulary observed in a scene list (plus "and"), in sorted order."""
    objects = sorted({inst.label for s in scenes for inst in s.instances})
    predicates = sorted({r.predicate for s in scenes for r in s.relationships} | set(extra_predicates) | {NEUTRAL_PREDICATE})
    return LabelVocabulary(tuple(objects), tuple(predicates))


def write_scene_collection(scenes: list[Scene], vocabulary: LabelVocabulary, out_dir: str | Path, seed: int | None = None) -> None:
    """Write scenes plus manifest.json and vocab.json into a dataset directory."""
    out_dir = Path(out_dir)
    (out_dir / "scenes").mkdir(parents=True, exist_ok=True)
    files = []
    for i, scene in enumerate(scenes):
        rel = f"scenes/scene_{i:04d}.json"
        save_scene(scene, out_dir / rel)
        files.append(rel)
    manifest = {"count": len(scenes), "scene_files": files, "vocabulary": vocabulary.to_dict()}
    if seed is not None:
        manifest["seed"] = seed
    (out_dir / "manifest.json").write_bytes(canonical_metadata_bytes(manifest))
    (out_dir / "vocab.json").write_bytes(canonical_metadata_bytes(vocabulary.to_dict()))


def load_scene_collection(dataset_dir: str | Path) -> tuple[list[Scene], LabelVocabulary]:
    dataset_dir = Path(dataset_dir)
    manifest_path = dataset_dir / "manifest.json"
    if not manifest_path.exists():
        raise SceneFormatError(f"{dataset_dir}: missing manifest.json")
    manifest = json.loads(manifest_path.read_text())
    scenes = [load_scene(dataset_dir / rel) for rel in manifest["scene_files"]]
    return scenes, LabelVocabulary.from_dict(manifest["vocabulary"])
