"""Print the attention a trained encoder pays between the entities of a scene.

    python3 demos/attention_map.py

Trains a small model for a few epochs, then shows the last layer's
head-averaged attention for one scene as a table, with each entity's
category and box centre so the pattern can be read against the layout.

On the synthetic data the maps come out close to uniform. That is what the
data rewards: the hidden context is shared by every entity of a scene, so
averaging over all of them is the best estimate of it.
"""

import numpy as np

from mbbr import autodiff as ad
from mbbr.encoder import EncoderConfig, PaddedBatch, attention_scores
from mbbr.pretrain import MaskPlan, PretrainConfig, assemble, entity_embeddings, pretrain
from mbbr.synthetic import SyntheticConfig, synthesize_dataset

scenes = synthesize_dataset(SyntheticConfig(num_scenes=200, seed=1))
enc = EncoderConfig(num_layers=2, num_heads=4, model_dim=64, ffn_dim=128)
res = pretrain(scenes, PretrainConfig(epochs=8), enc)

scene = scenes[0]
inp = assemble([scene], [MaskPlan(np.zeros(scene.num_entities, bool))])
with ad.no_grad():
    maps = attention_scores(PaddedBatch(entity_embeddings(inp, res.fusion), inp.real), res.encoder, enc)
attn = maps[-1][0].mean(axis=0)

print(f"scene {scene.scene_id}: {scene.num_entities} entities (rows attend to columns)\n")
for i, e in enumerate(scene.entities):
    cx, cy = (e.box.x_lt + e.box.x_rb) / 2, (e.box.y_lt + e.box.y_rb) / 2
    cells = " ".join(f"{a:.2f}" for a in attn[i])
    print(f"{i:2d} cat {e.category_id:2d} @({cx:4.0f},{cy:4.0f})  {cells}")
print(f"\nuniform attention would be {1 / scene.num_entities:.2f} everywhere")
