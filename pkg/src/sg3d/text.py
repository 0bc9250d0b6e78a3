"""Text prompts, the deterministic stub encoder, and embedding-table I/O.

Object and predicate prompts are the raw label strings; relationship
prompts use the fixed "A scene of a [subject] is [predicate] a [object]"
sentence. Target vectors arrive either from a LANGEMB1 file exported by a
real text encoder or from `stub_embed`, a seeded stand-in whose sentence
embeddings are the normalized sum of their part embeddings so alignment
properties stay testable offline.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import PromptLookupError, TableFormatError
from .scenes import NEUTRAL_PREDICATE, LabelVocabulary, Scene

TABLE_MAGIC = b"LANGEMB1"
SENTENCE_PREFIX = "A scene of a "
UNIT_NORM_TOL = 1e-5


class PromptKind(Enum):
    OBJECT_NAME = "object"
    PREDICATE_NAME = "predicate"
    RELATIONSHIP_SENTENCE = "relationship"


def object_prompt(label: str) -> str:
    """Object prompts are the label verbatim."""
    if not label:
        raise ValueError("object label must be nonempty")
    return label


def predicate_prompt(label: str) -> str:
    """Predicate prompts are the category name verbatim."""
    if not label:
        raise ValueError("predicate label must be nonempty")
    return label


def relationship_prompt(subject: str, predicate: str, obj: str) -> str:
    if not subject or not predicate or not obj:
        raise ValueError("relationship prompt components must be nonempty")
    return f"A scene of a {subject} is {predicate} a {obj}"


def parse_relationship_prompt(prompt: str) -> tuple[str, str, str] | None:
    """Invert `relationship_prompt`; None if the string is not a sentence.

    Subject ends at the first " is ", object starts at the last " a "; this
    is unambiguous for label vocabularies that avoid those substrings.
    """
    if not prompt.startswith(SENTENCE_PREFIX):
        return None
    rest = prompt[len(SENTENCE_PREFIX):]
    is_at = rest.find(" is ")
    if is_at <= 0:
        return None
    subject = rest[:is_at]
    tail = rest[is_at + 4:]
    a_at = tail.rfind(" a ")
    if a_at <= 0 or a_at + 3 >= len(tail):
        return None
    return subject, tail[:a_at], tail[a_at + 3:]


def _atom_embed(text: str, seed: int, dim: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{text}".encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    v = np.random.default_rng(np.random.SeedSequence(words)).standard_normal(dim)
    return v / np.linalg.norm(v)


def stub_embed(prompt: str, seed: int, dim: int) -> np.ndarray:
    """Deterministic unit embedding of a prompt.

    Relationship sentences embed as normalize(subject + predicate + object)
    so they stay measurably closer to their parts than to unrelated labels.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    parts = parse_relationship_prompt(prompt)
    if parts is None:
        v = _atom_embed(prompt, seed, dim)
    else:
        v = sum(_atom_embed(p, seed, dim) for p in parts)
        v = v / np.linalg.norm(v)
    return v.astype(np.float32)


@dataclass
class EmbeddingTable:
    dim: int
    entries: dict[str, np.ndarray]
    provenance: str = "unknown"

    def __post_init__(self):
        for prompt, vec in self.entries.items():
            if vec.shape != (self.dim,):
                raise TableFormatError(f"entry {prompt!r}: dimension {vec.shape} != ({self.dim},)")
            norm = float(np.linalg.norm(vec.astype(np.float64)))
            if abs(norm - 1.0) > UNIT_NORM_TOL:
                raise TableFormatError(f"entry {prompt!r}: norm {norm:.8f} not unit within {UNIT_NORM_TOL}")
            vec.setflags(write=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingTable):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.provenance == other.provenance
            and list(self.entries) == list(other.entries)
            and all(np.array_equal(v, other.entries[k]) for k, v in self.entries.items())
        )


def lookup(table: EmbeddingTable, prompt: str) -> np.ndarray:
    try:
        return table.entries[prompt]
    except KeyError:
        raise PromptLookupError(f"prompt not in table: {prompt!r}") from None


def save_table(table: EmbeddingTable, path: str | Path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(TABLE_MAGIC)
        fh.write(struct.pack("<II", len(table.entries), table.dim))
        for prompt, vec in table.entries.items():
            raw = prompt.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())
        # optional trailing provenance record; absent means "unknown"
        raw = table.provenance.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)


def load_table(path: str | Path) -> EmbeddingTable:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:8] != TABLE_MAGIC:
        raise TableFormatError(f"{path}: bad magic")
    count, dim = struct.unpack_from("<II", raw, 8)
    offset = 16
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        if offset + 2 > len(raw):
            raise TableFormatError(f"{path}: truncated entry header")
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        end = offset + name_len + dim * 4
        if end > len(raw):
            raise TableFormatError(f"{path}: truncated entry payload")
        prompt = raw[offset : offset + name_len].decode("utf-8")
        vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=offset + name_len).copy()
        entries[prompt] = vec
        offset = end
    provenance = "unknown"
    if offset < len(raw):
        if offset + 2 > len(raw):
            raise TableFormatError(f"{path}: truncated provenance record")
        (prov_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        if offset + prov_len != len(raw):
            raise TableFormatError(f"{path}: trailing bytes after provenance record")
        provenance = raw[offset : offset + prov_len].decode("utf-8")
    return EmbeddingTable(dim, entries, provenance)


def enumerate_relationship_prompts(scenes: list[Scene], vocabulary: LabelVocabulary) -> list[str]:
    """Every relationship sentence a pre-training epoch over `scenes` can request.

    For each directed edge: its positive sentences (neutral predicate when no
    relation) plus the one-slot-substitution closure the hard-negative sampler
    draws from. Enumerated from the data, not the full label product.
    """
    triples: set[tuple[str, str, str]] = set()
    for scene in scenes:
        labels = {inst.id: inst.label for inst in scene.instances}
        preds: dict[tuple[int, int], set[str]] = {}
        for rel in scene.relationships:
            preds.setdefault((rel.subject_id, rel.object_id), set()).add(rel.predicate)
        for i in labels:
            for j in labels:
                if i == j:
                    continue
                for p in preds.get((i, j), {NEUTRAL_PREDICATE}):
                    triples.add((labels[i], p, labels[j]))

    closure: set[str] = set()
    for s, p, o in triples:
        closure.add(relationship_prompt(s, p, o))
        for s2 in vocabulary.object_labels:
            closure.add(relationship_prompt(s2, p, o))
        for p2 in vocabulary.predicate_labels:
            closure.add(relationship_prompt(s, p2, o))
        for o2 in vocabulary.object_labels:
            closure.add(relationship_prompt(s, p, o2))
    return sorted(closure)


def build_stub_table(
    vocabulary: LabelVocabulary,
    sentences: list[str],
    seed: int,
    dim: int,
    extra_prompts: list[str] = (),
    composites: dict[str, list[str]] | None = None,
) -> EmbeddingTable:
    """Stub-encoder table covering a vocabulary, sentences, and extras.

    `composites` maps a prompt to member labels; its vector is the normalized
    sum of the member embeddings (the stub's compositional rule), which is
    how synthetic room-type queries are built for zero-shot tests.
    """
    entries: dict[str, np.ndarray] = {}
    for label in vocabulary.object_labels:
        entries[object_prompt(label)] = stub_embed(label, seed, dim)
    for label in vocabulary.predicate_labels:
        entries.setdefault(predicate_prompt(label), stub_embed(label, seed, dim))
    for sentence in sentences:
        entries.setdefault(sentence, stub_embed(sentence, seed, dim))
    for prompt in extra_prompts:
        entries.setdefault(prompt, stub_embed(prompt, seed, dim))
    for prompt, members in (composites or {}).items():
        v = np.sum([_atom_embed(m, seed, dim) for m in members], axis=0)
        entries[prompt] = (v / np.linalg.norm(v)).astype(np.float32)
    return EmbeddingTable(dim, entries, provenance="stub")
