"""Masked bounding-box reconstruction pretraining.

Each entity's visual feature is hidden with probability ``mask_ratio`` and
replaced by a learned mask vector. The (possibly hidden) feature is
concatenated with the entity's geometry embedding, projected to the model
width, passed through the encoder and projected back to feature space. The
loss is the MSE against the original features of *all* entities, hidden or
not.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .encoder import EncoderConfig, EncoderWeights, PaddedBatch, encode, pad_batch
from .errors import ConfigError, DataError, DimensionError, NumericError
from .geometry import EMBED_DIM, scene_geometry
from .optim import Adam
from .params import ParamSet, xavier_uniform
from .scenes import FEATURE_DIM, Scene

RNG_STREAMS = {"init": 1, "shuffle": 2, "mask": 3, "dropout": 4}


@dataclass(frozen=True)
class PretrainConfig:
    mask_ratio: float = 0.5
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 2e-3
    weight_decay: float = 1e-4
    fine_tune_epochs: int = 20
    loss_kind: str = "reconstruction"
    seed: int = 0
    mask_token: str = "learned"
    decoupled_weight_decay: bool = False
    lr_schedule: str = "constant"
    grad_clip: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError("mask_ratio must be in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1 or self.fine_tune_epochs < 0:
            raise ConfigError("epochs must be non-negative and batch_size positive")
        if self.loss_kind not in ("reconstruction", "classification"):
            raise ConfigError(f"unknown loss_kind {self.loss_kind!r}")
        if self.mask_token not in ("learned", "zeros"):
            raise ConfigError(f"unknown mask_token {self.mask_token!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for one stage of a seeded run."""
    return np.random.default_rng([seed, RNG_STREAMS[name], *extra])


# -- masking ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MaskPlan:
    masked: np.ndarray  # bool, one entry per entity

    def __post_init__(self):
        arr = np.asarray(self.masked, dtype=bool).reshape(-1)
        arr.setflags(write=False)
        object.__setattr__(self, "masked", arr)

    def __len__(self) -> int:
        return self.masked.shape[0]

    @property
    def num_masked(self) -> int:
        return int(self.masked.sum())


def draw_mask(scene: Scene, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Mask each entity independently with probability ``ratio``."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError("mask ratio must be in [0, 1]")
    return MaskPlan(rng.random(scene.num_entities) < ratio)


# -- fusion weights ----------------------------------------------------------------

class FusionWeights(ParamSet):
    """Mask vector, input projection (512 -> D) and reconstruction head (D -> 256)."""

    @classmethod
    def init(cls, model_dim: int, rng: np.random.Generator, num_categories: int | None = None) -> "FusionWeights":
        fw = cls()
        fw.add("mask_vector", rng.standard_normal(FEATURE_DIM) * 0.02)
        fw.add("input_projection.weight", xavier_uniform(rng, FEATURE_DIM + EMBED_DIM, model_dim))
        fw.add("input_projection.bias", np.zeros(model_dim))
        fw.add("reconstruction_projection.weight", xavier_uniform(rng, model_dim, FEATURE_DIM))
        fw.add("reconstruction_projection.bias", np.zeros(FEATURE_DIM))
        if num_categories is not None:
            fw.add("class_head.weight", xavier_uniform(rng, model_dim, num_categories))
            fw.add("class_head.bias", np.zeros(num_categories))
        return fw


# -- forward pieces -----------------------------------------------------------------

@dataclass
class BatchInputs:
    features: np.ndarray   # (B, N, 256) original f_b, zero padded
    geometry: np.ndarray   # (B, N, 256) f_pos
    masked: np.ndarray     # (B, N) bool
    real: np.ndarray       # (B, N) bool


def assemble(scenes: Sequence[Scene], plans: Sequence[MaskPlan], geometry_cache: dict | None = None) -> BatchInputs:
    if len(scenes) != len(plans):
        raise DimensionError("one mask plan per scene is required")
    feats, geos, masks = [], [], []
    for s, plan in zip(scenes, plans):
        if len(plan) != s.num_entities:
            raise DimensionError(f"mask plan length {len(plan)} != {s.num_entities} entities in {s.scene_id!r}")
        if s.num_entities == 0:
            raise DataError(f"scene {s.scene_id!r} has no entities")
        feats.append(s.features())
        if geometry_cache is not None:
            if s.scene_id not in geometry_cache:
                geometry_cache[s.scene_id] = scene_geometry(s)
            geos.append(geometry_cache[s.scene_id])
        else:
            geos.append(scene_geometry(s))
        masks.append(plan.masked[:, None].astype(np.float64))
    f, real = pad_batch(feats)
    g, _ = pad_batch(geos)
    m, _ = pad_batch(masks)
    return BatchInputs(f, g, m[..., 0] > 0.5, real)


def entity_embeddings(inp: BatchInputs, fw: FusionWeights, mask_token: str = "learned") -> Tensor:
    """f_e for a padded batch, shape (B, N, D); padded rows are exactly zero."""
    m = inp.masked[..., None].astype(np.float64)
    visual = ad.Tensor(inp.features * (1.0 - m))
    if mask_token == "learned":
        visual = visual + fw["mask_vector"] * ad.Tensor(m)
    fused = ad.concat([visual, ad.Tensor(inp.geometry)], axis=-1)
    fe = ad.linear(fused, fw["input_projection.weight"], fw["input_projection.bias"])
    return fe * ad.Tensor(inp.real[..., None].astype(np.float64))


def build_entity_embeddings(scene: Scene, plan: MaskPlan, fw: FusionWeights, mask_token: str = "learned") -> Tensor:
    """f_e for one scene, shape (N, D)."""
    inp = assemble([scene], [plan])
    fe = entity_embeddings(inp, fw, mask_token)
    return fe.reshape(fe.shape[1], fe.shape[2])


def encode_inputs(inp: BatchInputs, fw: FusionWeights, ew: EncoderWeights, cfg: EncoderConfig,
                  mask_token: str = "learned", rng=None) -> Tensor:
    return encode(PaddedBatch(entity_embeddings(inp, fw, mask_token), inp.real), ew, cfg, rng)


def reconstruct_batch(z: Tensor, fw: FusionWeights) -> Tensor:
    return ad.linear(z, fw["reconstruction_projection.weight"], fw["reconstruction_projection.bias"])


def reconstruct(scene: Scene, plan: MaskPlan, fw: FusionWeights, ew: EncoderWeights, cfg: EncoderConfig,
                mask_token: str = "learned") -> Tensor:
    """y_rec for one scene, shape (N, 256)."""
    inp = assemble([scene], [plan])
    y = reconstruct_batch(encode_inputs(inp, fw, ew, cfg, mask_token), fw)
    return y.reshape(scene.num_entities, FEATURE_DIM)


def _real_rows(inp: BatchInputs, which: np.ndarray | None = None) -> np.ndarray:
    sel = inp.real if which is None else (inp.real & which)
    return np.flatnonzero(sel.reshape(-1))


def reconstruction_loss(inp: BatchInputs, fw, ew, cfg, mask_token="learned", rng=None) -> Tensor:
    """MSE between y_rec and f_b over every real entity of the batch."""
    z = encode_inputs(inp, fw, ew, cfg, mask_token, rng)
    y = reconstruct_batch(z, fw)
    rows = _real_rows(inp)
    pred = ad.take_rows(y.reshape(-1, FEATURE_DIM), rows)
    return ad.mse_loss(pred, inp.features.reshape(-1, FEATURE_DIM)[rows])


def classification_loss(inp: BatchInputs, categories: np.ndarray, fw, ew, cfg, mask_token="learned",
                        rng=None) -> Tensor | None:
    """Cross-entropy of the masked entities' categories from z; None if nothing is masked."""
    rows = _real_rows(inp, inp.masked)
    if rows.size == 0:
        return None
    z = encode_inputs(inp, fw, ew, cfg, mask_token, rng)
    zr = ad.take_rows(z.reshape(-1, z.shape[-1]), rows)
    logits = ad.linear(zr, fw["class_head.weight"], fw["class_head.bias"])
    return ad.cross_entropy(logits, categories.reshape(-1)[rows])


# -- training ----------------------------------------------------------------------

@dataclass
class PretrainResult:
    fusion: FusionWeights
    encoder: EncoderWeights
    encoder_config: EncoderConfig
    config: PretrainConfig
    history: list = field(default_factory=list)
    log: dict = field(default_factory=dict)


def init_weights(encoder_cfg: EncoderConfig, cfg: PretrainConfig, num_categories: int | None = None):
    rng = stream(cfg.seed, "init")
    ew = EncoderWeights.init(encoder_cfg, rng)
    fw = FusionWeights.init(encoder_cfg.model_dim, rng,
                            num_categories if cfg.loss_kind == "classification" else None)
    return fw, ew


def _lr_at(cfg: PretrainConfig, step: int, total: int) -> float:
    if cfg.lr_schedule == "cosine" and total > 0:
        return 0.5 * cfg.learning_rate * (1.0 + np.cos(np.pi * step / total))
    return cfg.learning_rate


def _clip(params, max_norm):
    grads = [p.grad for p in params if p.grad is not None]
    norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / norm)


def pretrain(scenes: Sequence[Scene], cfg: PretrainConfig = PretrainConfig(),
             encoder_cfg: EncoderConfig = EncoderConfig(), num_categories: int | None = None,
             progress=None) -> PretrainResult:
    """Train fusion + encoder weights on ``scenes``.

    In reconstruction mode the relationship lists are stripped before training
    and categories are never read. ``progress`` is an optional callable
    receiving ``(epoch, mean_loss)``.
    """
    classification = cfg.loss_kind == "classification"
    if classification:
        data = [s for s in scenes if s.num_entities > 0]
        if num_categories is None:
            num_categories = 1 + max((int(s.categories().max()) for s in data), default=0)
    else:
        # Strip relationships and categories: the pretext task needs neither.
        data = [replace(s.without_relationships(),
                        entities=tuple(replace(e, category_id=0) for e in s.entities))
                for s in scenes if s.num_entities > 0]
    if not data:
        raise DataError("pretraining needs at least one scene with entities")

    fw, ew = init_weights(encoder_cfg, cfg, num_categories)
    params = fw.params() + ew.params()
    opt = Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay,
               decoupled=cfg.decoupled_weight_decay)
    shuffle_rng = stream(cfg.seed, "shuffle")
    mask_rng = stream(cfg.seed, "mask")
    drop_rng = stream(cfg.seed, "dropout") if encoder_cfg.dropout > 0 else None
    geo_cache: dict = {}
    n_batches = -(-len(data) // cfg.batch_size)
    total_steps = cfg.epochs * n_batches

    history, epochs_log = [], []
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(data))
        losses = []
        for b in range(n_batches):
            batch = [data[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            plans = [draw_mask(s, cfg.mask_ratio, mask_rng) for s in batch]
            try:
                inp = assemble(batch, plans, geo_cache)
                if classification:
                    cats, _ = pad_batch([s.categories()[:, None].astype(np.float64) for s in batch])
                    loss = classification_loss(inp, cats[..., 0].astype(np.int64), fw, ew, encoder_cfg,
                                               cfg.mask_token, drop_rng)
                    if loss is None:
                        continue
                else:
                    loss = reconstruction_loss(inp, fw, ew, encoder_cfg, cfg.mask_token, drop_rng)
                opt.zero_grad()
                ad.backward(loss)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} batch {b}: {exc}") from None
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"epoch {epoch} batch {b}: loss is {value}")
            if cfg.grad_clip is not None:
                _clip(params, cfg.grad_clip)
            opt.state.learning_rate = _lr_at(cfg, step, total_steps)
            opt.step()
            step += 1
            losses.append(value)
        mean = float(np.mean(losses)) if losses else float("nan")
        history.append(mean)
        epochs_log.append({"epoch": epoch, "loss": mean, "wall_time": time.perf_counter() - t0})
        if progress is not None:
            progress(epoch, mean)

    log = {"config": cfg.to_dict(), "encoder_config": encoder_cfg.to_dict(), "seed": cfg.seed,
           "num_scenes": len(data), "epochs": epochs_log}
    return PretrainResult(fw, ew, encoder_cfg, cfg, history, log)


def pretrain_classification_variant(scenes, cfg: PretrainConfig = PretrainConfig(),
                                    encoder_cfg: EncoderConfig = EncoderConfig(),
                                    num_categories: int | None = None, progress=None) -> PretrainResult:
    """Same pipeline, but predict the category of masked entities instead of reconstructing."""
    return pretrain(scenes, replace(cfg, loss_kind="classification"), encoder_cfg, num_categories, progress)


# -- inference helpers -----------------------------------------------------------------

def infer(scenes: Sequence[Scene], fw: FusionWeights, ew: EncoderWeights, cfg: EncoderConfig,
          plans: Sequence[MaskPlan] | None = None, mask_token: str = "learned",
          batch_size: int = 64) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-scene (z, y_rec) arrays. Without ``plans`` nothing is masked."""
    zs, ys = [], []
    for start in range(0, len(scenes), batch_size):
        chunk = list(scenes[start:start + batch_size])
        chunk_plans = (list(plans[start:start + batch_size]) if plans is not None
                       else [MaskPlan(np.zeros(s.num_entities, dtype=bool)) for s in chunk])
        keep = [i for i, s in enumerate(chunk) if s.num_entities > 0]
        out_z = {i: np.zeros((0, cfg.model_dim)) for i in range(len(chunk))}
        out_y = {i: np.zeros((0, FEATURE_DIM)) for i in range(len(chunk))}
        if keep:
            inp = assemble([chunk[i] for i in keep], [chunk_plans[i] for i in keep])
            with ad.no_grad():
                z = encode_inputs(inp, fw, ew, cfg, mask_token)
                y = reconstruct_batch(z, fw)
            for j, i in enumerate(keep):
                n = chunk[i].num_entities
                out_z[i] = z.data[j, :n].copy()
                out_y[i] = y.data[j, :n].copy()
        zs.extend(out_z[i] for i in range(len(chunk)))
        ys.extend(out_y[i] for i in range(len(chunk)))
    return zs, ys


# -- persistence ---------------------------------------------------------------------

def save_pretrained(path, result: PretrainResult, meta: dict | None = None) -> None:
    """One checkpoint holding fusion and encoder weights plus both configs."""
    tensors = {f"fusion/{k}": v for k, v in result.fusion.state_dict().items()}
    tensors.update({f"encoder/{k}": v for k, v in result.encoder.state_dict().items()})
    info = {"kind": "mbbr_pretrain", "encoder_config": result.encoder_config.to_dict(),
            "pretrain_config": result.config.to_dict(), "history": list(result.history)}
    info.update(meta or {})
    checkpoint.save(path, tensors, info)


def load_pretrained(path) -> PretrainResult:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "mbbr_pretrain":
        raise DataError(f"{path}: not a pretraining checkpoint (kind={meta.get('kind')!r})")
    try:
        ecfg = EncoderConfig(**meta["encoder_config"])
        cfg = PretrainConfig(**meta["pretrain_config"])
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed checkpoint metadata ({exc})") from None
    fw = FusionWeights({k[len("fusion/"):]: v for k, v in tensors.items() if k.startswith("fusion/")})
    ew = EncoderWeights(ecfg, {k[len("encoder/"):]: v for k, v in tensors.items() if k.startswith("encoder/")})
    return PretrainResult(fw, ew, ecfg, cfg, list(meta.get("history", [])), {})
