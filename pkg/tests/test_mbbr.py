from dataclasses import replace

import numpy as np
import pytest

from fdcheck import check, tiny_scenes
from mbbr import autodiff as ad
from mbbr.encoder import EncoderConfig
from mbbr.errors import ConfigError, DataError, DimensionError
from mbbr.geometry import normalize_box, sinusoidal_embed
from mbbr.pretrain import (FusionWeights, MaskPlan, PretrainConfig, assemble, build_entity_embeddings, draw_mask,
                           infer, init_weights, load_pretrained, pretrain, reconstruct, reconstruction_loss,
                           save_pretrained)
from mbbr.scenes import BoundingBox, Entity, Scene
from mbbr.synthetic import SyntheticConfig, synthesize_dataset

SMALL = EncoderConfig(num_layers=1, num_heads=2, model_dim=16, ffn_dim=32)


@pytest.fixture(scope="module")
def scenes():
    return synthesize_dataset(SyntheticConfig(num_scenes=24, seed=4))


def _plan(n, masked=()):
    m = np.zeros(n, bool)
    m[list(masked)] = True
    return MaskPlan(m)


# -- masking -------------------------------------------------------------------------

def test_draw_mask_extremes(scenes):
    rng = np.random.default_rng(0)
    assert draw_mask(scenes[0], 0.0, rng).num_masked == 0
    assert draw_mask(scenes[0], 1.0, rng).num_masked == scenes[0].num_entities
    with pytest.raises(ConfigError):
        draw_mask(scenes[0], 1.5, rng)


def test_draw_mask_concentration():
    scene = Scene("one", 10, 10, (Entity(0, BoundingBox(0, 0, 1, 1), np.zeros(256)),), ())
    rng = np.random.default_rng(123)
    frac = np.mean([draw_mask(scene, 0.5, rng).num_masked for _ in range(10_000)])
    assert 0.48 <= frac <= 0.52


# -- fused embeddings -----------------------------------------------------------------

def _zero_weights(d=16):
    fw = FusionWeights.init(d, np.random.default_rng(0))
    for _, t in fw.named():
        t.data[...] = 0.0
    return fw


def test_zero_weights_give_zero_embeddings(scenes):
    fe = build_entity_embeddings(scenes[0], _plan(scenes[0].num_entities, [0]), _zero_weights())
    assert np.all(fe.data == 0.0)


def test_masked_entity_embedding_is_mask_vector_and_geometry():
    rng = np.random.default_rng(1)
    fw = FusionWeights.init(16, rng)
    box = BoundingBox(10, 20, 60, 90)
    s = Scene("s", 100, 100, (Entity(0, box, rng.standard_normal(256)), Entity(1, box, rng.standard_normal(256))), ())
    fe = build_entity_embeddings(s, _plan(2, [0, 1]), fw).data
    # identical boxes + both masked -> identical embeddings, whatever the features were
    np.testing.assert_array_equal(fe[0], fe[1])
    geo = sinusoidal_embed(normalize_box(box.as_tuple(), 100, 100))
    want = np.concatenate([fw["mask_vector"].data, geo]) @ fw["input_projection.weight"].data \
        + fw["input_projection.bias"].data
    np.testing.assert_allclose(fe[0], want, atol=1e-12)
    unmasked = build_entity_embeddings(s, _plan(2), fw).data
    assert not np.allclose(unmasked[0], fe[0])


def test_mask_plan_length_mismatch(scenes):
    with pytest.raises(DimensionError):
        assemble([scenes[0]], [_plan(scenes[0].num_entities + 1)])


# -- reconstruction -------------------------------------------------------------------

def test_reconstruction_shape_and_determinism(scenes):
    fw, ew = init_weights(SMALL, PretrainConfig())
    plan = _plan(scenes[1].num_entities, [1])
    a = reconstruct(scenes[1], plan, fw, ew, SMALL).data
    b = reconstruct(scenes[1], plan, fw, ew, SMALL).data
    assert a.shape == (scenes[1].num_entities, 256)
    np.testing.assert_array_equal(a, b)


def test_batched_loss_equals_entity_weighted_per_scene_mean(scenes):
    fw, ew = init_weights(SMALL, PretrainConfig())
    chunk = scenes[:5]
    plans = [draw_mask(s, 0.5, np.random.default_rng(i)) for i, s in enumerate(chunk)]
    batched = reconstruction_loss(assemble(chunk, plans), fw, ew, SMALL).item()
    sq, count = 0.0, 0
    for s, p in zip(chunk, plans):
        y = reconstruct(s, p, fw, ew, SMALL).data
        sq += float(((y - s.features()) ** 2).sum())
        count += y.size
    assert abs(batched - sq / count) < 1e-10


def test_mask_vector_gradient(scenes):
    fw, ew = init_weights(SMALL, PretrainConfig())
    inp = assemble(scenes[:2], [_plan(s.num_entities, [0]) for s in scenes[:2]])
    err = check(lambda: reconstruction_loss(inp, fw, ew, SMALL), [fw["mask_vector"]], max_entries=10)
    assert err < 1e-4


def test_learns_constant_features():
    # 128 scenes x 30 epochs at the default optimiser settings is 240 Adam steps.
    rng = np.random.default_rng(5)
    const = rng.standard_normal(256)
    data = []
    for i in range(128):
        ents = []
        for _ in range(3):
            x, y = rng.uniform(0, 70, 2)
            ents.append(Entity(0, BoundingBox(x, y, x + 20, y + 20), const))
        data.append(Scene(f"c{i}", 100, 100, tuple(ents), ()))
    res = pretrain(data, PretrainConfig(epochs=30), SMALL)
    assert res.history[-1] < 1e-4


def test_zero_epochs_returns_initialisation(scenes):
    cfg = PretrainConfig(epochs=0, seed=3)
    res = pretrain(scenes, cfg, SMALL)
    fw, ew = init_weights(SMALL, cfg)
    assert res.fusion.equals(fw) and res.encoder.equals(ew)
    assert res.history == []


def test_single_category_classification_loss_vanishes():
    rng = np.random.default_rng(0)
    data = [Scene(f"s{i}", 100, 100, tuple(Entity(0, BoundingBox(0, 0, 50, 50), rng.standard_normal(256))
                                           for _ in range(3)), ()) for i in range(4)]
    cfg = PretrainConfig(epochs=1, loss_kind="classification", mask_ratio=1.0)
    res = pretrain(data, cfg, SMALL)
    assert res.history == [0.0]


def test_masked_entities_are_harder_to_reconstruct(scenes):
    res = pretrain(scenes, PretrainConfig(epochs=15, batch_size=8), SMALL)
    rng = np.random.default_rng(9)
    plans = [draw_mask(s, 0.5, rng) for s in scenes]
    _, ys = infer(scenes, res.fusion, res.encoder, SMALL, plans)
    err_m = np.concatenate([((y - s.features()) ** 2).mean(1)[p.masked] for s, y, p in zip(scenes, ys, plans)])
    err_u = np.concatenate([((y - s.features()) ** 2).mean(1)[~p.masked] for s, y, p in zip(scenes, ys, plans)])
    assert err_m.mean() > err_u.mean()


def test_reconstruction_pretraining_never_reads_labels(scenes):
    cfg = PretrainConfig(epochs=2, batch_size=8)
    a = pretrain(scenes, cfg, SMALL)
    relabeled = [replace(s, entities=tuple(replace(e, category_id=7) for e in s.entities),
                         relationships=()) for s in scenes]
    b = pretrain(relabeled, cfg, SMALL)
    assert a.history == b.history and a.encoder.equals(b.encoder)


def test_empty_input_raises():
    with pytest.raises(DataError):
        pretrain([], PretrainConfig(epochs=1), SMALL)


def test_save_and_load_pretrained(tmp_path, scenes):
    res = pretrain(scenes[:8], PretrainConfig(epochs=1, batch_size=4), SMALL)
    save_pretrained(tmp_path / "m.ckpt", res)
    back = load_pretrained(tmp_path / "m.ckpt")
    assert back.fusion.equals(res.fusion) and back.encoder.equals(res.encoder)
    assert back.encoder_config == SMALL and back.config == res.config and back.history == res.history


def test_load_pretrained_rejects_other_checkpoints(tmp_path):
    from mbbr import checkpoint
    checkpoint.save(tmp_path / "x.ckpt", {"a": np.zeros(2)}, {"kind": "classifier"})
    with pytest.raises(DataError):
        load_pretrained(tmp_path / "x.ckpt")
