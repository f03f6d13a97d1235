"""Few-shot predicate classifier on frozen entity representations.

A pair feature concatenates, in this order and omitting disabled blocks:

    z_subject (256) | z_object (256) | spatial (14) | label_subject (300) | label_object (300)

and a 2-layer MLP maps it to K predicate logits.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, DimensionError
from .geometry import normalize_box
from .optim import Adam
from .params import ParamSet, xavier_uniform
from .pretrain import FusionWeights, MaskPlan, assemble, encode_inputs, infer, stream
from .encoder import EncoderConfig, EncoderWeights
from .scenes import FEATURE_DIM, LabelEmbeddingTable, Sample, Scene

SPATIAL_DIM = 14


# -- spatial features -------------------------------------------------------------

def compute_spatial(box_s, box_o, width: float, height: float) -> np.ndarray:
    """14-d spatial descriptor of a directed subject/object box pair.

    Layout: normalised subject box (4), normalised object box (4),
    ``dx / w_s, dy / h_s, log(w_o / w_s), log(h_o / h_s)`` with ``dx, dy`` the
    object-minus-subject centre offsets (4), IoU (1), union area over image
    area (1).
    """
    ns = normalize_box(box_s, width, height)
    no = normalize_box(box_o, width, height)
    s = np.asarray(box_s.as_tuple() if hasattr(box_s, "as_tuple") else box_s, dtype=np.float64)
    o = np.asarray(box_o.as_tuple() if hasattr(box_o, "as_tuple") else box_o, dtype=np.float64)
    ws, hs = s[2] - s[0], s[3] - s[1]
    wo, ho = o[2] - o[0], o[3] - o[1]
    dx = (o[0] + o[2]) / 2 - (s[0] + s[2]) / 2
    dy = (o[1] + o[3]) / 2 - (s[1] + s[3]) / 2
    ix = max(0.0, min(s[2], o[2]) - max(s[0], o[0]))
    iy = max(0.0, min(s[3], o[3]) - max(s[1], o[1]))
    inter = ix * iy
    union = ws * hs + wo * ho - inter
    rel = [dx / ws, dy / hs, np.log(wo / ws), np.log(ho / hs), inter / union, union / (width * height)]
    return np.concatenate([ns, no, rel])


# -- pair features ----------------------------------------------------------------

@dataclass(frozen=True)
class FeatureAblationConfig:
    use_visual: bool = True
    use_spatial: bool = True
    use_linguistic: bool = True

    def __post_init__(self):
        if not (self.use_visual or self.use_spatial or self.use_linguistic):
            raise ConfigError("at least one feature block must be enabled")

    @property
    def label(self) -> str:
        return "+".join(n for n, on in (("L", self.use_linguistic), ("S", self.use_spatial),
                                         ("V", self.use_visual)) if on)

    def dim(self, visual_dim: int = FEATURE_DIM, label_dim: int = 300) -> int:
        return (2 * visual_dim * self.use_visual + SPATIAL_DIM * self.use_spatial
                + 2 * label_dim * self.use_linguistic)


def build_pair_feature(scene: Scene, subj: int, obj: int, z: np.ndarray | None,
                       table: LabelEmbeddingTable | None, ab: FeatureAblationConfig = FeatureAblationConfig()) -> np.ndarray:
    """Concatenated pair descriptor; ``z`` is the (n, d) per-entity representation of ``scene``."""
    n = scene.num_entities
    if not (0 <= subj < n and 0 <= obj < n):
        raise IndexError(f"pair ({subj}, {obj}) out of range for {n} entities")
    if subj == obj:
        raise IndexError("subject and object must differ")
    parts = []
    if ab.use_visual:
        if z is None or z.shape[0] != n:
            raise DimensionError("visual block needs one representation row per entity")
        parts += [z[subj], z[obj]]
    if ab.use_spatial:
        es, eo = scene.entities[subj], scene.entities[obj]
        parts.append(compute_spatial(es.box, eo.box, scene.width, scene.height))
    if ab.use_linguistic:
        if table is None:
            raise DataError("linguistic block needs a label embedding table")
        parts += [table[scene.entities[subj].category_id], table[scene.entities[obj].category_id]]
    return np.concatenate(parts)


ZProvider = Callable[[Scene], np.ndarray]


def raw_provider() -> ZProvider:
    """Use the detector features f_b themselves as the visual block."""
    return lambda scene: scene.features()


def encoded_provider(fw: FusionWeights, ew: EncoderWeights, cfg: EncoderConfig,
                     mask_token: str = "learned") -> ZProvider:
    """Encoder outputs z from an unmasked forward pass, cached per scene id."""
    cache: dict[str, np.ndarray] = {}

    def provide(scene: Scene) -> np.ndarray:
        if scene.scene_id not in cache:
            cache[scene.scene_id] = infer([scene], fw, ew, cfg, mask_token=mask_token)[0][0]
        return cache[scene.scene_id]

    provide.prime = lambda scenes: cache.update(
        {s.scene_id: z for s, z in zip(scenes, infer(list(scenes), fw, ew, cfg, mask_token=mask_token)[0])})
    return provide


# -- classifier ---------------------------------------------------------------------

@dataclass(frozen=True)
class FewShotConfig:
    hidden: int = 512
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 2e-3
    weight_decay: float = 1e-4
    seed: int = 0
    freeze_encoder: bool = True
    standardize: bool = False
    representation: str = "encoded"
    features: FeatureAblationConfig = FeatureAblationConfig()

    def __post_init__(self):
        if self.representation not in ("encoded", "raw"):
            raise ConfigError("representation must be 'encoded' or 'raw'")
        if self.hidden < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("invalid classifier sizes")

    def to_dict(self) -> dict:
        return asdict(self)


class ClassifierWeights(ParamSet):
    """Two affine layers with ReLU between.

    ``input.shift`` / ``input.scale`` are fixed (never trained): they
    standardise each input dimension with statistics of the training pairs.
    """

    @classmethod
    def init(cls, in_dim: int, hidden: int, num_predicates: int, rng: np.random.Generator) -> "ClassifierWeights":
        w = cls()
        w.add("input.shift", np.zeros(in_dim))
        w.add("input.scale", np.ones(in_dim))
        w.add("fc1.weight", xavier_uniform(rng, in_dim, hidden))
        w.add("fc1.bias", np.zeros(hidden))
        w.add("fc2.weight", xavier_uniform(rng, hidden, num_predicates))
        w.add("fc2.bias", np.zeros(num_predicates))
        return w

    def trainable(self) -> list:
        return [t for name, t in self.named() if not name.startswith("input.")]

    def fit_standardization(self, x: np.ndarray) -> None:
        std = x.std(axis=0)
        self["input.shift"].data = x.mean(axis=0)
        self["input.scale"].data = np.where(std > 1e-6, 1.0 / np.maximum(std, 1e-6), 1.0)

    @property
    def in_dim(self) -> int:
        return self["fc1.weight"].shape[0]

    @property
    def num_predicates(self) -> int:
        return self["fc2.weight"].shape[1]


def classifier_logits(x, w: ClassifierWeights):
    x = (ad.as_tensor(x) - w["input.shift"].detach()) * w["input.scale"].detach()
    h = ad.relu(ad.linear(x, w["fc1.weight"], w["fc1.bias"]))
    return ad.linear(h, w["fc2.weight"], w["fc2.bias"])


def predict_pair(pair_feature: np.ndarray, w: ClassifierWeights) -> np.ndarray:
    """Softmax scores over the K predicates for one pair (or a stack of pairs)."""
    x = np.asarray(pair_feature, dtype=np.float64)
    if x.shape[-1] != w.in_dim:
        raise DimensionError(f"pair feature has {x.shape[-1]} dims, classifier expects {w.in_dim}")
    with ad.no_grad():
        logits = classifier_logits(x.reshape(-1, w.in_dim), w)
        scores = ad.softmax(logits, axis=-1).data
    return scores[0] if x.ndim == 1 else scores


def ranked_predicates(scores: np.ndarray) -> np.ndarray:
    """Predicate ids by descending score; ties go to the lower id."""
    return np.argsort(-np.asarray(scores), kind="stable")


def _index(scenes: Sequence[Scene]) -> dict[str, Scene]:
    return {s.scene_id: s for s in scenes}


def sample_features(samples: Sequence[Sample], scenes: Mapping[str, Scene], provider: ZProvider | None,
                    table: LabelEmbeddingTable | None, ab: FeatureAblationConfig) -> np.ndarray:
    rows = []
    for smp in samples:
        scene = scenes[smp.scene_id]
        z = provider(scene) if ab.use_visual else None
        rows.append(build_pair_feature(scene, smp.triplet.subject_index, smp.triplet.object_index, z, table, ab))
    return np.stack(rows)


@dataclass
class FewShotResult:
    weights: ClassifierWeights
    history: list
    train_accuracy: float


def train_few_shot(samples: Sequence[Sample], scenes: Sequence[Scene] | Mapping[str, Scene],
                   provider: ZProvider | None, table: LabelEmbeddingTable | None, num_predicates: int,
                   cfg: FewShotConfig = FewShotConfig(), encoder=None) -> FewShotResult:
    """Fit the 2-layer MLP on the k-shot samples.

    With ``cfg.freeze_encoder`` (default) pair features are computed once and
    nothing upstream changes. Otherwise ``encoder`` must be a
    ``(FusionWeights, EncoderWeights, EncoderConfig)`` tuple whose weights are
    updated jointly with the classifier.
    """
    if not samples:
        raise DataError("few-shot training needs at least one sample")
    by_id = scenes if isinstance(scenes, Mapping) else _index(scenes)
    ab = cfg.features
    labels = np.array([s.triplet.predicate_id for s in samples], dtype=np.int64)
    rng = stream(cfg.seed, "init", 7)
    shuffle = stream(cfg.seed, "shuffle", 7)
    fine_tune = not cfg.freeze_encoder and ab.use_visual
    if fine_tune and encoder is None:
        raise ConfigError("unfrozen training needs the encoder weights")

    if not fine_tune:
        X = sample_features(samples, by_id, provider, table, ab)
        in_dim = X.shape[1]
    else:
        fw, ew, ecfg = encoder
        rest = FeatureAblationConfig(False, ab.use_spatial, ab.use_linguistic) if (ab.use_spatial or ab.use_linguistic) else None
        X_rest = sample_features(samples, by_id, None, table, rest) if rest else None
        in_dim = 2 * ecfg.model_dim + (X_rest.shape[1] if X_rest is not None else 0)

    w = ClassifierWeights.init(in_dim, cfg.hidden, num_predicates, rng)
    if cfg.standardize:
        if fine_tune:
            with ad.no_grad():
                w.fit_standardization(_fine_tune_batch(list(samples), by_id, fw, ew, ecfg, X_rest).data)
        else:
            w.fit_standardization(X)
    params = w.trainable() + (fw.params() + ew.params() if fine_tune else [])
    opt = Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    history = []
    n = len(samples)
    for _ in range(cfg.epochs):
        order = shuffle.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if fine_tune:
                x = _fine_tune_batch([samples[i] for i in idx], by_id, fw, ew, ecfg,
                                     None if X_rest is None else X_rest[idx])
            else:
                x = ad.Tensor(X[idx])
            loss = ad.cross_entropy(classifier_logits(x, w), labels[idx])
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))

    if fine_tune:
        with ad.no_grad():
            x = _fine_tune_batch(list(samples), by_id, fw, ew, ecfg, X_rest)
            pred = classifier_logits(x, w).data.argmax(axis=1)
    else:
        pred = predict_pair(X, w).argmax(axis=1)
    return FewShotResult(w, history, float(np.mean(pred == labels)))


def _fine_tune_batch(batch: Sequence[Sample], by_id, fw, ew, ecfg, x_rest):
    ids = list(dict.fromkeys(s.scene_id for s in batch))
    scenes = [by_id[i] for i in ids]
    inp = assemble(scenes, [MaskPlan(np.zeros(s.num_entities, dtype=bool)) for s in scenes])
    z = encode_inputs(inp, fw, ew, ecfg)
    n_max = z.shape[1]
    flat = z.reshape(-1, z.shape[-1])
    pos = {sid: b for b, sid in enumerate(ids)}
    subj = [pos[s.scene_id] * n_max + s.triplet.subject_index for s in batch]
    obj = [pos[s.scene_id] * n_max + s.triplet.object_index for s in batch]
    parts = [ad.take_rows(flat, subj), ad.take_rows(flat, obj)]
    if x_rest is not None:
        parts.append(ad.Tensor(x_rest))
    return ad.concat(parts, axis=-1)


# -- batch inference on ground-truth pairs ----------------------------------------

@dataclass(frozen=True, eq=False)
class PairPrediction:
    scene_id: str
    subject_index: int
    object_index: int
    scores: np.ndarray

    def to_record(self) -> dict:
        return {"scene_id": self.scene_id, "subject": self.subject_index, "object": self.object_index,
                "scores": [float(v) for v in self.scores]}


def gt_pairs(scene: Scene) -> list[tuple[int, int]]:
    """Distinct ground-truth (subject, object) pairs in first-appearance order."""
    return list(dict.fromkeys(r.pair for r in scene.relationships))


def predict_scenes(scenes: Sequence[Scene], w: ClassifierWeights, provider: ZProvider | None,
                   table: LabelEmbeddingTable | None, ab: FeatureAblationConfig) -> dict[str, list[PairPrediction]]:
    out = {}
    for scene in scenes:
        pairs = gt_pairs(scene)
        if not pairs:
            out[scene.scene_id] = []
            continue
        z = provider(scene) if ab.use_visual else None
        X = np.stack([build_pair_feature(scene, s, o, z, table, ab) for s, o in pairs])
        scores = predict_pair(X, w).reshape(len(pairs), -1)
        out[scene.scene_id] = [PairPrediction(scene.scene_id, s, o, sc) for (s, o), sc in zip(pairs, scores)]
    return out
