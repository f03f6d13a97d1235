"""Scene, entity and relationship records plus JSONL ingestion.

A scene file holds one JSON object per line::

    {"scene_id": str, "width": num, "height": num,
     "entities": [{"category_id": int, "box": [x_lt, y_lt, x_rb, y_rb], "feature": [256 nums]}],
     "relationships": [{"subject": int, "object": int, "predicate_id": int}]}

Blank lines are ignored. Every record is validated on load and failures are
reported with their 1-based line number.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, ShortageError

FEATURE_DIM = 256


@dataclass(frozen=True)
class BoundingBox:
    x_lt: float
    y_lt: float
    x_rb: float
    y_rb: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_lt, self.y_lt, self.x_rb, self.y_rb)

    @property
    def width(self) -> float:
        return self.x_rb - self.x_lt

    @property
    def height(self) -> float:
        return self.y_rb - self.y_lt

    def validate(self, width: float, height: float) -> None:
        if not all(np.isfinite(self.as_tuple())):
            raise DataError(f"non-finite box {self.as_tuple()}")
        if not (self.x_lt < self.x_rb and self.y_lt < self.y_rb):
            raise DataError(f"degenerate box {self.as_tuple()}")
        if self.x_lt < 0 or self.y_lt < 0 or self.x_rb > width or self.y_rb > height:
            raise DataError(f"box {self.as_tuple()} outside image {width}x{height}")


@dataclass(frozen=True, eq=False)
class Entity:
    category_id: int
    box: BoundingBox
    feature: np.ndarray

    def __post_init__(self):
        feat = np.array(self.feature, dtype=np.float64)
        feat.setflags(write=False)
        object.__setattr__(self, "feature", feat)

    def __eq__(self, other):
        return (isinstance(other, Entity) and self.category_id == other.category_id
                and self.box == other.box and np.array_equal(self.feature, other.feature))


@dataclass(frozen=True)
class RelationshipTriplet:
    subject_index: int
    object_index: int
    predicate_id: int

    @property
    def pair(self) -> tuple[int, int]:
        return (self.subject_index, self.object_index)


@dataclass(frozen=True)
class Scene:
    scene_id: str
    width: float
    height: float
    entities: tuple = ()
    relationships: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "relationships", tuple(self.relationships))

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    def boxes(self) -> np.ndarray:
        return np.array([e.box.as_tuple() for e in self.entities], dtype=np.float64).reshape(-1, 4)

    def features(self) -> np.ndarray:
        if not self.entities:
            return np.zeros((0, FEATURE_DIM))
        return np.stack([e.feature for e in self.entities])

    def categories(self) -> np.ndarray:
        return np.array([e.category_id for e in self.entities], dtype=np.int64)

    def without_relationships(self) -> "Scene":
        return replace(self, relationships=())

    def validate(self, num_categories: int | None = None, num_predicates: int | None = None) -> None:
        if not (np.isfinite(self.width) and np.isfinite(self.height)) or self.width <= 0 or self.height <= 0:
            raise DataError(f"scene {self.scene_id!r}: image size must be positive, got {self.width}x{self.height}")
        for i, ent in enumerate(self.entities):
            try:
                ent.box.validate(self.width, self.height)
            except DataError as exc:
                raise DataError(f"scene {self.scene_id!r} entity {i}: {exc}") from None
            if ent.feature.shape != (FEATURE_DIM,):
                raise DataError(f"scene {self.scene_id!r} entity {i}: feature dimension "
                                f"{ent.feature.shape[0] if ent.feature.ndim == 1 else ent.feature.shape} != {FEATURE_DIM}")
            if not np.all(np.isfinite(ent.feature)):
                raise DataError(f"scene {self.scene_id!r} entity {i}: non-finite feature")
            if ent.category_id < 0 or (num_categories is not None and ent.category_id >= num_categories):
                raise DataError(f"scene {self.scene_id!r} entity {i}: category {ent.category_id} out of range")
        n = len(self.entities)
        for j, rel in enumerate(self.relationships):
            for idx in (rel.subject_index, rel.object_index):
                if not 0 <= idx < n:
                    raise DataError(f"scene {self.scene_id!r} relationship {j}: entity index {idx} "
                                    f"out of range for {n} entities")
            if rel.subject_index == rel.object_index:
                raise DataError(f"scene {self.scene_id!r} relationship {j}: subject equals object")
            if rel.predicate_id < 0 or (num_predicates is not None and rel.predicate_id >= num_predicates):
                raise DataError(f"scene {self.scene_id!r} relationship {j}: predicate {rel.predicate_id} out of range")

    # -- JSON ----------------------------------------------------------------
    def to_record(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "width": self.width,
            "height": self.height,
            "entities": [{"category_id": e.category_id, "box": list(e.box.as_tuple()),
                          "feature": [float(v) for v in e.feature]} for e in self.entities],
            "relationships": [{"subject": r.subject_index, "object": r.object_index,
                               "predicate_id": r.predicate_id} for r in self.relationships],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Scene":
        if not isinstance(rec, dict):
            raise DataError("record is not a JSON object")
        try:
            entities = []
            for e in rec["entities"]:
                box = e["box"]
                if len(box) != 4:
                    raise DataError(f"box must have 4 coordinates, got {len(box)}")
                entities.append(Entity(_as_int(e["category_id"], "category_id"),
                                       BoundingBox(*(float(v) for v in box)),
                                       np.asarray(e["feature"], dtype=np.float64)))
            rels = [RelationshipTriplet(_as_int(r["subject"], "subject"), _as_int(r["object"], "object"),
                                        _as_int(r["predicate_id"], "predicate_id"))
                    for r in rec.get("relationships", [])]
            return cls(str(rec["scene_id"]), float(rec["width"]), float(rec["height"]), entities, rels)
        except KeyError as exc:
            raise DataError(f"missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"malformed record: {exc}") from None


def _as_int(v, what: str) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
        raise DataError(f"{what} must be an integer, got {v!r}")
    return int(v)


def scene_to_json(scene: Scene) -> str:
    return json.dumps(scene.to_record(), separators=(",", ":"))


def write_scenes(path, scenes: Iterable[Scene]) -> None:
    from .checkpoint import atomic_write_bytes

    text = "".join(scene_to_json(s) + "\n" for s in scenes)
    atomic_write_bytes(path, text.encode("utf-8"))


def load_scenes(path, num_categories: int | None = None, num_predicates: int | None = None) -> list[Scene]:
    """Read and validate a scene JSONL file, preserving file order."""
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"invalid JSON: {exc.msg}", line=lineno) from None
            try:
                scene = Scene.from_record(rec)
                scene.validate(num_categories, num_predicates)
            except DataError as exc:
                raise DataError(str(exc), line=lineno) from None
            scenes.append(scene)
    return scenes


# -- k-shot sampling ------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    """One labelled training pair drawn from a scene."""

    scene_id: str
    triplet_index: int
    triplet: RelationshipTriplet


def triplets_by_predicate(scenes: Sequence[Scene], num_predicates: int) -> list[list[Sample]]:
    pools: list[list[Sample]] = [[] for _ in range(num_predicates)]
    for scene in scenes:
        for t, rel in enumerate(scene.relationships):
            pools[rel.predicate_id].append(Sample(scene.scene_id, t, rel))
    return pools


def sample_k_shot(scenes: Sequence[Scene], k: int, num_predicates: int, seed: int) -> list[Sample]:
    """Draw exactly ``k`` triplets per predicate category without replacement.

    Raises :class:`ShortageError` naming every category with fewer than ``k``
    available triplets.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    if k == 0:
        return []
    pools = triplets_by_predicate(scenes, num_predicates)
    short = {p: len(pool) for p, pool in enumerate(pools) if len(pool) < k}
    if short:
        raise ShortageError(short, k)
    rng = np.random.default_rng(seed)
    out: list[Sample] = []
    for pool in pools:
        pick = rng.choice(len(pool), size=k, replace=False)
        out.extend(pool[i] for i in sorted(pick))
    return out


def curated_samples(scenes: Sequence[Scene], selection: Iterable[tuple[str, int]]) -> list[Sample]:
    """Resolve an explicit list of ``(scene_id, triplet_index)`` pairs."""
    by_id = {s.scene_id: s for s in scenes}
    out = []
    for scene_id, t in selection:
        if scene_id not in by_id:
            raise DataError(f"unknown scene_id {scene_id!r} in curated selection")
        rels = by_id[scene_id].relationships
        if not 0 <= t < len(rels):
            raise DataError(f"scene {scene_id!r} has no triplet {t}")
        out.append(Sample(scene_id, t, rels[t]))
    return out


# -- label embeddings --------------------------------------------------------------

LABEL_DIM = 300


@dataclass(frozen=True, eq=False)
class LabelEmbeddingTable:
    vectors: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return next(iter(self.vectors.values())).shape[0] if self.vectors else 0

    def __getitem__(self, category_id: int) -> np.ndarray:
        return self.vectors[category_id]

    def covers(self, category_ids: Iterable[int]) -> None:
        missing = sorted(set(int(c) for c in category_ids) - set(self.vectors))
        if missing:
            raise DataError(f"label embedding table is missing categories {missing}")

    def matrix(self, num_categories: int) -> np.ndarray:
        self.covers(range(num_categories))
        return np.stack([self.vectors[c] for c in range(num_categories)])


def build_label_embeddings(num_categories: int, source=None, seed: int = 0,
                           dim: int = LABEL_DIM) -> LabelEmbeddingTable:
    """Label vectors for categories ``0..num_categories-1``.

    With ``source=None`` each category gets a seeded random unit-norm vector.
    Otherwise ``source`` is a JSONL path of ``{"category_id", "vector"}`` rows,
    loaded verbatim; every category must be present and all vectors must share
    one dimension.
    """
    if source is None:
        rng = np.random.default_rng(seed)
        raw = rng.standard_normal((num_categories, dim))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        return LabelEmbeddingTable({c: raw[c] for c in range(num_categories)})

    vectors: dict[int, np.ndarray] = {}
    with open(source, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                cid = _as_int(rec["category_id"], "category_id")
                vec = np.asarray(rec["vector"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"bad label embedding record: {exc}", line=lineno) from None
            if vec.ndim != 1 or not np.all(np.isfinite(vec)):
                raise DataError("vector must be a finite 1-d list", line=lineno)
            if vectors and vec.shape != next(iter(vectors.values())).shape:
                raise DataError("vector dimension differs from earlier rows", line=lineno)
            vectors[cid] = vec
    table = LabelEmbeddingTable(vectors)
    table.covers(range(num_categories))
    return table
