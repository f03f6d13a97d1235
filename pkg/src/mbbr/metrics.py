"""Recall_k@N for predicate detection.

For each scene every given subject/object pair contributes its top-k
predicates; the N most confident of those candidates are kept and a
ground-truth triplet counts as recalled when it is among them.

Ordering is fully deterministic: score descending, then pair position in the
prediction list, then predicate id ascending. Within a pair the top-k
selection breaks ties towards the lower predicate id.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class RecallConfig:
    k: int = 1
    n: int = 20
    average: str = "macro"

    def __post_init__(self):
        if self.k < 1 or self.n < 1:
            raise ConfigError("k and N must be at least 1")
        if self.average not in ("macro", "micro"):
            raise ConfigError("average must be 'macro' or 'micro'")


def kept_triplets(pairs: Sequence[tuple[int, int]], scores: np.ndarray, k: int, n: int) -> set[tuple[int, int, int]]:
    """The (subject, object, predicate) candidates surviving the k and N budgets."""
    scores = np.asarray(scores, dtype=np.float64).reshape(len(pairs), -1)
    cand = []
    for p, (s, o) in enumerate(pairs):
        top = np.argsort(-scores[p], kind="stable")[:k]
        cand.extend((-scores[p, q], p, int(q), s, o) for q in top)
    cand.sort(key=lambda c: c[:3])
    return {(s, o, q) for _, _, q, s, o in cand[:n]}


def scene_hits(scene, preds, cfg: RecallConfig) -> tuple[int, int]:
    gt = scene.relationships
    if not gt:
        return 0, 0
    pairs = [(p.subject_index, p.object_index) for p in preds]
    have = set(pairs)
    missing = sorted({r.pair for r in gt} - have)
    if missing:
        raise DataError(f"scene {scene.scene_id!r}: no prediction for ground-truth pairs {missing}")
    kept = kept_triplets(pairs, np.stack([p.scores for p in preds]), cfg.k, cfg.n)
    hits = sum((r.subject_index, r.object_index, r.predicate_id) in kept for r in gt)
    return hits, len(gt)


def recall_at(predictions: Mapping[str, Sequence], scenes: Sequence, cfg: RecallConfig = RecallConfig()) -> float:
    """R_k@N over ``scenes``; ``predictions`` maps scene id to its PairPredictions.

    Scenes without ground-truth triplets have no recall to measure and are
    skipped. Macro averaging (default) averages per-scene recall; micro pools
    all triplets.
    """
    per_scene, hits_total, gt_total = [], 0, 0
    for scene in scenes:
        if not scene.relationships:
            continue
        if scene.scene_id not in predictions:
            raise DataError(f"no predictions for scene {scene.scene_id!r}")
        hits, total = scene_hits(scene, predictions[scene.scene_id], cfg)
        per_scene.append(hits / total)
        hits_total += hits
        gt_total += total
    if not per_scene:
        raise DataError("recall needs at least one scene with ground-truth triplets")
    if cfg.average == "micro":
        return hits_total / gt_total
    return float(np.mean(per_scene))
