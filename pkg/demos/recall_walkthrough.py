"""How R_k@N counts hits, including the case where a larger k hurts.

    python3 demos/recall_walkthrough.py

Each subject/object pair proposes its top-k predicates; all proposals of a
scene are pooled and only the N most confident survive. Raising k adds
proposals to the pool, and under a tight N those can push out a correct
proposal from another pair.
"""

import numpy as np

from mbbr.fewshot import PairPrediction
from mbbr.metrics import RecallConfig, kept_triplets, recall_at
from mbbr.scenes import BoundingBox, Entity, RelationshipTriplet, Scene

ents = tuple(Entity(0, BoundingBox(0, 0, 10, 10), np.zeros(256)) for _ in range(3))
scene = Scene("demo", 100, 100, ents, (RelationshipTriplet(0, 1, 0), RelationshipTriplet(0, 2, 0)))
preds = {"demo": [PairPrediction("demo", 0, 1, np.array([0.9, 0.8, 0.0])),
                  PairPrediction("demo", 0, 2, np.array([0.7, 0.2, 0.1]))]}
pairs = [(0, 1), (0, 2)]
scores = np.stack([p.scores for p in preds["demo"]])

print("ground truth: (0,1,pred 0) and (0,2,pred 0)")
print("scores per pair:", {pr: s.tolist() for pr, s in zip(pairs, scores)})
for k in (1, 2, 3):
    for n in (1, 2, 3, 6):
        kept = sorted(kept_triplets(pairs, scores, k, n))
        r = recall_at(preds, [scene], RecallConfig(k, n))
        print(f"k={k} N={n}: recall {r:.2f}  kept {kept}")
