"""Seeded synthetic scene benchmark.

Every scene draws a latent context vector ``c`` (32-d, standard normal).
Entity features are

    f_b = prototype[category] + alpha * (M @ c) + sigma_n * noise

so an entity whose own feature is hidden can still be partly recovered from
the other entities of its scene. The context strength ``alpha`` also tilts the
category distribution of a scene (logits ``alpha * A @ c``); with ``alpha = 0``
categories are uniform and nothing observable predicts a hidden feature
beyond the global mean.

Relationships come from fixed rules evaluated on the boxes and categories:

* a seeded table of ordered category pairs carries "semantic" predicates;
  which of its two predicates applies depends on the sign of ``u . c``;
* otherwise the first geometric rule that fires: contains, overlaps
  (IoU > 0.25), above / below (vertical centre offset > 0.2 H),
  left-of / right-of (horizontal centre offset > 0.2 W).

Image y grows downwards, so "above" means a smaller centre y.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .scenes import FEATURE_DIM, BoundingBox, Entity, RelationshipTriplet, Scene

CONTEXT_DIM = 32
GEOMETRIC_PREDICATES = ("above", "below", "left_of", "right_of", "overlaps", "contains")
OVERLAP_IOU = 0.25
OFFSET_FRACTION = 0.2
SEMANTIC_PAIR_RATE = 0.25
CATEGORY_SHARPNESS = 2.0
MIN_BOX_FRACTION, MAX_BOX_FRACTION = 0.1, 0.5
IMAGE_SIZE_RANGE = (400, 800)

_WORLD_STREAM = 0x5EED
_SCENE_STREAM = 0x5CE7E


@dataclass(frozen=True)
class SyntheticConfig:
    num_scenes: int = 500
    min_entities: int = 4
    max_entities: int = 8
    num_categories: int = 20
    num_predicates: int = 10
    prototype_scale: float = 0.5
    context_strength: float = 1.0
    feature_noise: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.num_scenes < 0:
            raise ConfigError("num_scenes must be non-negative")
        if self.min_entities < 0 or self.max_entities < self.min_entities:
            raise ConfigError("entity range must satisfy 0 <= min_entities <= max_entities")
        if self.num_categories < 1 or self.num_predicates < 1:
            raise ConfigError("num_categories and num_predicates must be positive")
        if min(self.prototype_scale, self.context_strength, self.feature_noise) < 0:
            raise ConfigError("noise scales and context strength must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def predicate_names(num_predicates: int) -> list[str]:
    geo = list(GEOMETRIC_PREDICATES[:num_predicates])
    return geo + [f"semantic_{i}" for i in range(num_predicates - len(geo))]


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    """The fixed, seed-determined parts of the generator."""

    prototypes: np.ndarray          # (C, 256)
    mixing: np.ndarray              # (256, 32)
    category_coupling: np.ndarray   # (C, 32)
    context_direction: np.ndarray   # (32,), unit norm
    pair_rules: dict = field(default_factory=dict)  # (cat_s, cat_o) -> (pred if u.c >= 0, pred otherwise)

    @classmethod
    def from_config(cls, cfg: SyntheticConfig) -> "SyntheticWorld":
        rng = np.random.default_rng([cfg.seed, _WORLD_STREAM])
        C = cfg.num_categories
        prototypes = cfg.prototype_scale * rng.standard_normal((C, FEATURE_DIM))
        mixing = rng.standard_normal((FEATURE_DIM, CONTEXT_DIM)) / np.sqrt(CONTEXT_DIM)
        coupling = CATEGORY_SHARPNESS * rng.standard_normal((C, CONTEXT_DIM)) / np.sqrt(CONTEXT_DIM)
        u = rng.standard_normal(CONTEXT_DIM)
        u /= np.linalg.norm(u)
        n_sem = max(0, cfg.num_predicates - len(GEOMETRIC_PREDICATES))
        rules = {}
        if n_sem:
            first = len(GEOMETRIC_PREDICATES)
            hit = rng.random((C, C)) < SEMANTIC_PAIR_RATE
            picks = rng.integers(0, n_sem, size=(C, C, 2))
            for a in range(C):
                for b in range(C):
                    if hit[a, b]:
                        p, q = picks[a, b]
                        if n_sem > 1 and q == p:
                            q = (p + 1) % n_sem
                        rules[(a, b)] = (first + int(p), first + int(q))
        return cls(prototypes, mixing, coupling, u, rules)


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def geometric_predicate(a, b, width: float, height: float, num_predicates: int) -> int | None:
    """First geometric rule that fires for subject box ``a`` and object box ``b``."""
    enabled = predicate_names(num_predicates)
    cya, cyb = (a[1] + a[3]) / 2, (b[1] + b[3]) / 2
    cxa, cxb = (a[0] + a[2]) / 2, (b[0] + b[2]) / 2
    checks = (
        ("contains", a[0] <= b[0] and a[1] <= b[1] and a[2] >= b[2] and a[3] >= b[3]),
        ("overlaps", box_iou(a, b) > OVERLAP_IOU),
        ("above", cyb - cya > OFFSET_FRACTION * height),
        ("below", cya - cyb > OFFSET_FRACTION * height),
        ("left_of", cxb - cxa > OFFSET_FRACTION * width),
        ("right_of", cxa - cxb > OFFSET_FRACTION * width),
    )
    for name, fired in checks:
        if fired and name in enabled:
            return enabled.index(name)
    return None


def scene_relationships(boxes: np.ndarray, categories, context: np.ndarray, world: SyntheticWorld,
                        width: float, height: float, num_predicates: int) -> list[RelationshipTriplet]:
    positive = float(world.context_direction @ context) >= 0.0
    rels = []
    n = len(categories)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            rule = world.pair_rules.get((int(categories[i]), int(categories[j])))
            if rule is not None:
                pred = rule[0] if positive else rule[1]
            else:
                pred = geometric_predicate(boxes[i], boxes[j], width, height, num_predicates)
            if pred is not None:
                rels.append(RelationshipTriplet(i, j, pred))
    return rels


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    scenes: list
    world: SyntheticWorld
    contexts: np.ndarray  # (num_scenes, 32)
    config: SyntheticConfig


def _scene(cfg: SyntheticConfig, world: SyntheticWorld, index: int):
    rng = np.random.default_rng([cfg.seed, _SCENE_STREAM, index])
    width = float(rng.integers(IMAGE_SIZE_RANGE[0], IMAGE_SIZE_RANGE[1] + 1))
    height = float(rng.integers(IMAGE_SIZE_RANGE[0], IMAGE_SIZE_RANGE[1] + 1))
    n = int(rng.integers(cfg.min_entities, cfg.max_entities + 1))
    context = rng.standard_normal(CONTEXT_DIM)

    logits = cfg.context_strength * (world.category_coupling @ context)
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    categories = rng.choice(cfg.num_categories, size=n, p=probs)

    frac = rng.uniform(MIN_BOX_FRACTION, MAX_BOX_FRACTION, size=(n, 2))
    w, h = frac[:, 0] * width, frac[:, 1] * height
    x0 = rng.uniform(0.0, 1.0, size=n) * (width - w)
    y0 = rng.uniform(0.0, 1.0, size=n) * (height - h)
    boxes = np.stack([x0, y0, x0 + w, y0 + h], axis=1)

    shared = cfg.context_strength * (world.mixing @ context)
    noise = cfg.feature_noise * rng.standard_normal((n, FEATURE_DIM))
    features = world.prototypes[categories] + shared + noise

    entities = [Entity(int(c), BoundingBox(*map(float, b)), f) for c, b, f in zip(categories, boxes, features)]
    rels = scene_relationships(boxes, categories, context, world, width, height, cfg.num_predicates)
    return Scene(f"synth-{cfg.seed}-{index:05d}", width, height, entities, rels), context


def generate(cfg: SyntheticConfig) -> SyntheticDataset:
    """Scenes plus the hidden quantities that produced them."""
    cfg.validate()
    world = SyntheticWorld.from_config(cfg)
    scenes, contexts = [], []
    for i in range(cfg.num_scenes):
        scene, ctx = _scene(cfg, world, i)
        scenes.append(scene)
        contexts.append(ctx)
    contexts = np.array(contexts).reshape(-1, CONTEXT_DIM)
    return SyntheticDataset(scenes, world, contexts, cfg)


def synthesize_dataset(cfg: SyntheticConfig) -> list[Scene]:
    return generate(cfg).scenes
