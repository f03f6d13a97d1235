"""Transformer encoder over the entities of a scene.

There is no sequence position encoding: entity order carries no meaning, so
the encoder is permutation-equivariant. Variable entity counts are handled by
padding to the longest scene in a batch and excluding padded keys from the
attention softmax.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .params import ParamSet, xavier_uniform


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 6
    num_heads: int = 8
    model_dim: int = 256
    ffn_dim: int = 1024
    dropout: float = 0.0
    activation: str = "relu"
    norm_placement: str = "pre"

    def __post_init__(self):
        if min(self.num_layers, self.num_heads, self.model_dim, self.ffn_dim) <= 0:
            raise ConfigError("encoder dimensions must be positive")
        if self.model_dim % self.num_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.activation not in ad.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.norm_placement not in ("post", "pre"):
            raise ConfigError("norm_placement must be 'post' or 'pre'")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


class EncoderWeights(ParamSet):
    """Per-layer attention, feed-forward and layer-norm parameters."""

    def __init__(self, cfg: EncoderConfig, tensors: dict | None = None):
        self.cfg = cfg
        super().__init__(tensors)

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: np.random.Generator) -> "EncoderWeights":
        d, f = cfg.model_dim, cfg.ffn_dim
        w = cls(cfg)
        for l in range(cfg.num_layers):
            p = f"layer{l}."
            for proj in ("q", "k", "v", "o"):
                w.add(p + f"w{proj}", xavier_uniform(rng, d, d))
                w.add(p + f"b{proj}", np.zeros(d))
            w.add(p + "ln1.gain", np.ones(d))
            w.add(p + "ln1.bias", np.zeros(d))
            w.add(p + "ffn.w1", xavier_uniform(rng, d, f))
            w.add(p + "ffn.b1", np.zeros(f))
            w.add(p + "ffn.w2", xavier_uniform(rng, f, d))
            w.add(p + "ffn.b2", np.zeros(d))
            w.add(p + "ln2.gain", np.ones(d))
            w.add(p + "ln2.bias", np.zeros(d))
        if cfg.norm_placement == "pre":
            w.add("final_ln.gain", np.ones(d))
            w.add("final_ln.bias", np.zeros(d))
        return w


@dataclass
class PaddedBatch:
    embeddings: Tensor        # (B, N_max, D)
    padding_mask: np.ndarray  # (B, N_max) bool, True = real entity

    def __post_init__(self):
        self.padding_mask = np.asarray(self.padding_mask, dtype=bool)
        if self.embeddings.ndim != 3 or self.embeddings.shape[:2] != self.padding_mask.shape:
            raise DimensionError(f"embeddings {self.embeddings.shape} do not match mask {self.padding_mask.shape}")
        if self.padding_mask.shape[0] and not self.padding_mask.any(axis=1).all():
            raise DimensionError("every scene in a batch needs at least one real entity")


def pad_batch(per_scene: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack (n_i, d) arrays into a zero-padded (B, N_max, d) array and its mask."""
    n_max = max(a.shape[0] for a in per_scene)
    d = per_scene[0].shape[1]
    out = np.zeros((len(per_scene), n_max, d))
    mask = np.zeros((len(per_scene), n_max), dtype=bool)
    for b, a in enumerate(per_scene):
        out[b, :a.shape[0]] = a
        mask[b, :a.shape[0]] = True
    return out, mask


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rate <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


def _attention(h: Tensor, key_mask: np.ndarray, w: EncoderWeights, p: str, cfg: EncoderConfig):
    B, N, D = h.shape
    H, dk = cfg.num_heads, cfg.head_dim

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, N, H, dk).transpose(0, 2, 1, 3)

    q = heads(ad.linear(h, w[p + "wq"], w[p + "bq"]))
    k = heads(ad.linear(h, w[p + "wk"], w[p + "bk"]))
    v = heads(ad.linear(h, w[p + "wv"], w[p + "bv"]))
    scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk))
    attn = ad.softmax(scores, axis=-1, mask=key_mask[:, None, None, :])
    ctx = ad.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, N, D)
    return ad.linear(ctx, w[p + "wo"], w[p + "bo"]), attn


def _forward(batch: PaddedBatch, w: EncoderWeights, cfg: EncoderConfig, rng=None):
    x = batch.embeddings
    if x.shape[-1] != cfg.model_dim:
        raise DimensionError(f"embedding dim {x.shape[-1]} != model_dim {cfg.model_dim}")
    if w.cfg.num_layers != cfg.num_layers or w[f"layer0.wq"].shape[0] != cfg.model_dim:
        raise DimensionError("encoder weights do not match config")
    act = ad.ACTIVATIONS[cfg.activation]
    mask = batch.padding_mask
    attn_maps = []
    h = x
    for l in range(cfg.num_layers):
        p = f"layer{l}."
        if cfg.norm_placement == "post":
            a, attn = _attention(h, mask, w, p, cfg)
            h = ad.layer_norm(h + _dropout(a, cfg.dropout, rng), w[p + "ln1.gain"], w[p + "ln1.bias"])
            f = ad.linear(act(ad.linear(h, w[p + "ffn.w1"], w[p + "ffn.b1"])), w[p + "ffn.w2"], w[p + "ffn.b2"])
            h = ad.layer_norm(h + _dropout(f, cfg.dropout, rng), w[p + "ln2.gain"], w[p + "ln2.bias"])
        else:
            a, attn = _attention(ad.layer_norm(h, w[p + "ln1.gain"], w[p + "ln1.bias"]), mask, w, p, cfg)
            h = h + _dropout(a, cfg.dropout, rng)
            g = ad.layer_norm(h, w[p + "ln2.gain"], w[p + "ln2.bias"])
            f = ad.linear(act(ad.linear(g, w[p + "ffn.w1"], w[p + "ffn.b1"])), w[p + "ffn.w2"], w[p + "ffn.b2"])
            h = h + _dropout(f, cfg.dropout, rng)
        attn_maps.append(attn.data)
    if cfg.norm_placement == "pre":
        h = ad.layer_norm(h, w["final_ln.gain"], w["final_ln.bias"])
    return h, attn_maps


def encode(batch: PaddedBatch, w: EncoderWeights, cfg: EncoderConfig, rng=None) -> Tensor:
    """Context-aware per-entity representations, shape (B, N_max, D).

    Rows at padded positions are computed but meaningless. ``rng`` is only
    used for dropout during training.
    """
    return _forward(batch, w, cfg, rng)[0]


def attention_scores(batch: PaddedBatch, w: EncoderWeights, cfg: EncoderConfig) -> list[np.ndarray]:
    """Post-softmax attention weights: one (B, heads, N_max, N_max) array per layer."""
    return _forward(batch, w, cfg)[1]


def attention_export(scene_id: str, maps: list[np.ndarray], b: int, n: int) -> dict:
    """JSON-ready nested lists for scene ``b`` of a batch: layer -> head -> n x n."""
    return {
        "scene_id": scene_id,
        "layers": [[m[b, h, :n, :n].tolist() for h in range(m.shape[1])] for m in maps],
    }
