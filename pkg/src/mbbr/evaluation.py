"""Experiment protocols: masked-entity probe, mask-ratio sweep, few-shot reports.

Datasets are split by position: the first ``train_fraction`` of the scenes
is used for pretraining, k-shot sampling and probe training; the rest is held
out for evaluation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .encoder import EncoderConfig
from .errors import ConfigError, DataError
from .fewshot import (FeatureAblationConfig, FewShotConfig, encoded_provider, predict_scenes,
                      raw_provider, train_few_shot)
from .metrics import RecallConfig, recall_at
from .optim import Adam
from .params import ParamSet, xavier_uniform
from .pretrain import PretrainConfig, PretrainResult, draw_mask, infer, pretrain, stream
from .scenes import Scene, build_label_embeddings, sample_k_shot

# Reported on VG200 / VRD; kept as labelled metadata, never compared numerically.
PUBLISHED_REFERENCE = {
    "mask_ratio_top1_vg200": {"0.10": 21.13, "0.25": 24.56, "0.50": 34.97, "0.75": 30.18, "0.90": 19.21},
    "raw_feature_top1_vg200": 74.9,
    "vrd_r20": {
        "ours": {"graph": {"10": [20.87, 2.46], "20": [21.52, 1.34]},
                 "no_graph": {"10": [30.75, 3.66], "20": [34.01, 2.51]}},
        "faster_rcnn": {"graph": {"10": [2.6, 2.81], "20": [14.03, 5.68]},
                        "no_graph": {"10": [8.13, 7.04], "20": [21.30, 9.48]}},
        "L+S": {"graph": {"10": [13.68, 2.27], "20": [16.02, 3.39]},
                "no_graph": {"10": [20.39, 1.22], "20": [26.30, 3.87]}},
        "classification_loss_graph_10": [16.7, 1.51],
    },
    "vg200_r20_ours": {"graph": {"10": [8.02, 1.32], "20": [15.37, 2.27]},
                       "no_graph": {"10": [16.71, 3.76], "20": [28.87, 2.30]}},
}


def split_scenes(scenes: Sequence[Scene], train_fraction: float = 0.8) -> tuple[list[Scene], list[Scene]]:
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError("train_fraction must be in (0, 1)")
    cut = int(round(len(scenes) * train_fraction))
    return list(scenes[:cut]), list(scenes[cut:])


def num_categories_of(scenes: Sequence[Scene]) -> int:
    return 1 + max((int(e.category_id) for s in scenes for e in s.entities), default=0)


# -- linear probe -----------------------------------------------------------------------

class LinearProbe(ParamSet):
    @classmethod
    def init(cls, in_dim: int, num_classes: int, rng) -> "LinearProbe":
        p = cls()
        p.add("weight", xavier_uniform(rng, in_dim, num_classes))
        p.add("bias", np.zeros(num_classes))
        return p


def train_linear_probe(x: np.ndarray, y: np.ndarray, num_classes: int, seed: int, epochs: int = 20,
                       batch_size: int = 16, lr: float = 2e-3, weight_decay: float = 1e-4) -> LinearProbe:
    probe = LinearProbe.init(x.shape[1], num_classes, stream(seed, "init", 11))
    opt = Adam(probe.params(), lr=lr, weight_decay=weight_decay)
    order_rng = stream(seed, "shuffle", 11)
    for _ in range(epochs):
        order = order_rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            logits = ad.linear(ad.Tensor(x[idx]), probe["weight"], probe["bias"])
            loss = ad.cross_entropy(logits, y[idx])
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
    return probe


def probe_accuracy(probe: LinearProbe, x: np.ndarray, y: np.ndarray) -> float:
    logits = x @ probe["weight"].data + probe["bias"].data
    return float(np.mean(np.argmax(logits, axis=1) == y))


@dataclass
class ProbeResult:
    ratio: float
    accuracy: float
    baseline_accuracy: float
    num_train: int
    num_test: int


def _masked_rows(scenes, result: PretrainResult, ratio: float, rng):
    plans = [draw_mask(s, ratio, rng) for s in scenes]
    _, ys = infer(scenes, result.fusion, result.encoder, result.encoder_config, plans,
                  mask_token=result.config.mask_token)
    rec, raw, cats = [], [], []
    for s, plan, y in zip(scenes, plans, ys):
        if plan.num_masked:
            rec.append(y[plan.masked])
            raw.append(s.features()[plan.masked])
            cats.append(s.categories()[plan.masked])
    if not rec:
        return np.zeros((0, 256)), np.zeros((0, 256)), np.zeros(0, dtype=np.int64)
    return np.concatenate(rec), np.concatenate(raw), np.concatenate(cats)


def masked_top1_probe(scenes: Sequence[Scene], result: PretrainResult, ratio: float, seed: int,
                      num_categories: int | None = None, train_fraction: float = 0.8,
                      epochs: int = 20) -> ProbeResult:
    """Top-1 category accuracy of a linear probe on reconstructions of masked entities.

    Masks are drawn at ``ratio``; the probe trains on the masked entities of
    the train split and is scored on those of the held-out split. A second
    probe trained on the same entities' raw features gives the baseline.
    """
    train, test = split_scenes([s for s in scenes if s.num_entities], train_fraction)
    C = num_categories or num_categories_of(scenes)
    rng = stream(seed, "mask", 21)
    xr_tr, xb_tr, y_tr = _masked_rows(train, result, ratio, rng)
    xr_te, xb_te, y_te = _masked_rows(test, result, ratio, rng)
    if len(y_tr) == 0 or len(y_te) == 0:
        raise DataError(f"mask ratio {ratio} left no masked entities in the "
                        f"{'train' if len(y_tr) == 0 else 'held-out'} split; the probe would be vacuous")
    rec_probe = train_linear_probe(xr_tr, y_tr, C, seed, epochs)
    raw_probe = train_linear_probe(xb_tr, y_tr, C, seed, epochs)
    return ProbeResult(ratio, probe_accuracy(rec_probe, xr_te, y_te), probe_accuracy(raw_probe, xb_te, y_te),
                       len(y_tr), len(y_te))


# -- sweeps -----------------------------------------------------------------------------

DEFAULT_RATIOS = (0.10, 0.25, 0.50, 0.75, 0.90)


def mask_ratio_sweep(scenes: Sequence[Scene], ratios: Sequence[float] = DEFAULT_RATIOS,
                     cfg: PretrainConfig = PretrainConfig(), encoder_cfg: EncoderConfig = EncoderConfig(),
                     seeds: Sequence[int] = (0,), train_fraction: float = 0.8, cache: dict | None = None,
                     progress=None) -> dict:
    """Pretrain at each ratio and probe at that ratio; one row per ratio in input order."""
    for r in ratios:
        if not 0.0 < r < 1.0:
            raise ConfigError(f"sweep ratios must lie in (0, 1), got {r}")
    train, _ = split_scenes(scenes, train_fraction)
    C = num_categories_of(scenes)
    rows = []
    for r in ratios:
        per_seed, base = [], []
        for seed in seeds:
            run_cfg = replace(cfg, mask_ratio=float(r), seed=seed)
            res = cached_pretrain(train, run_cfg, encoder_cfg, cache)
            pr = masked_top1_probe(scenes, res, r, seed, C, train_fraction, cfg.fine_tune_epochs)
            per_seed.append(pr.accuracy)
            base.append(pr.baseline_accuracy)
            if progress:
                progress(f"ratio={r} seed={seed} acc={pr.accuracy:.4f} raw={pr.baseline_accuracy:.4f}")
        rows.append({"ratio": float(r), "mean": float(np.mean(per_seed)), "std": float(np.std(per_seed)),
                     "per_seed": per_seed, "baseline_mean": float(np.mean(base)), "baseline_per_seed": base})
    return {"kind": "mask_ratio_sweep", "config": cfg.to_dict(), "encoder_config": encoder_cfg.to_dict(),
            "seeds": list(seeds), "rows": rows,
            "published_reference": {"label": "published (VG200, top-1 %)",
                                "values": PUBLISHED_REFERENCE["mask_ratio_top1_vg200"],
                                "raw_feature_baseline": PUBLISHED_REFERENCE["raw_feature_top1_vg200"]}}


def sweep_chart(report: dict, width: int = 40) -> str:
    """Plain-text bar chart of a mask-ratio sweep."""
    lines = ["ratio   accuracy"]
    for row in report["rows"]:
        bar = "#" * int(round(row["mean"] * width))
        lines.append(f"{row['ratio']:5.2f}   {row['mean']:.4f} {bar}")
    return "\n".join(lines)


def cached_pretrain(scenes, cfg: PretrainConfig, encoder_cfg: EncoderConfig, cache: dict | None,
                    num_categories: int | None = None) -> PretrainResult:
    key = (json.dumps(cfg.to_dict(), sort_keys=True), json.dumps(encoder_cfg.to_dict(), sort_keys=True),
           len(scenes), scenes[0].scene_id if scenes else "")
    if cache is not None and key in cache:
        return cache[key]
    res = pretrain(scenes, cfg, encoder_cfg, num_categories)
    if cache is not None:
        cache[key] = res
    return res


# -- few-shot evaluation ---------------------------------------------------------------------

@dataclass(frozen=True)
class EvalConfig:
    k_shots: tuple = (10,)
    seeds: tuple = (0, 1, 2, 3, 4)
    recall_n: int = 20
    train_fraction: float = 0.8
    average: str = "macro"
    label_seed: int = 0
    classifier: FewShotConfig = FewShotConfig()

    def to_dict(self) -> dict:
        return asdict(self)


def recall_modes(num_predicates: int, n: int, average: str = "macro") -> dict[str, RecallConfig]:
    return {"graph": RecallConfig(1, n, average), "no_graph": RecallConfig(num_predicates, n, average)}


def few_shot_recall(train: Sequence[Scene], test: Sequence[Scene], provider, table, num_predicates: int,
                    k: int, seed: int, clf_cfg: FewShotConfig, n: int = 20, average: str = "macro",
                    encoder=None) -> dict[str, float]:
    samples = sample_k_shot(train, k, num_predicates, seed)
    res = train_few_shot(samples, list(train) + list(test), provider, table, num_predicates,
                         replace(clf_cfg, seed=seed), encoder)
    if encoder is not None and not clf_cfg.freeze_encoder:
        fw, ew, ecfg = encoder
        provider = encoded_provider(fw, ew, ecfg)
    preds = predict_scenes(test, res.weights, provider, table, clf_cfg.features)
    return {mode: recall_at(preds, test, rc) for mode, rc in recall_modes(num_predicates, n, average).items()}


def _summary(values: list[float]) -> dict:
    # Population std: a single seed has spread 0.
    return {"mean": float(np.mean(values)), "std": float(np.std(values)), "per_seed": [float(v) for v in values]}


def evaluate_few_shot(scenes: Sequence[Scene], num_predicates: int, cfg: EvalConfig = EvalConfig(),
                      pretrained: PretrainResult | dict | None = None, table=None, progress=None) -> dict:
    """R@N under graph and no-graph constraints per k-shot, mean +- std over seeds.

    ``pretrained`` is a single :class:`PretrainResult` shared by all seeds, a
    mapping seed -> result, or None when ``cfg.classifier.representation`` is
    "raw" (or the visual block is disabled).
    """
    train, test = split_scenes(scenes, cfg.train_fraction)
    C = num_categories_of(scenes)
    table = table or build_label_embeddings(C, seed=cfg.label_seed)
    clf = cfg.classifier
    needs_encoder = clf.features.use_visual and clf.representation == "encoded"
    if needs_encoder and pretrained is None:
        raise ConfigError("encoded representations need pretrained weights")
    results: dict[tuple[int, str], list[float]] = {}
    for k in cfg.k_shots:
        for seed in cfg.seeds:
            res = pretrained.get(seed) if isinstance(pretrained, dict) else pretrained
            if needs_encoder:
                provider = encoded_provider(res.fusion, res.encoder, res.encoder_config, res.config.mask_token)
                provider.prime(list(train) + list(test))
                encoder = (res.fusion.copy(), res.encoder.copy(), res.encoder_config)
            else:
                provider, encoder = raw_provider(), None
            rec = few_shot_recall(train, test, provider, table, num_predicates, k, seed, clf,
                                  cfg.recall_n, cfg.average, encoder)
            for mode, v in rec.items():
                results.setdefault((k, mode), []).append(v)
            if progress:
                progress(f"k={k} seed={seed} " + " ".join(f"{m}={v:.4f}" for m, v in rec.items()))
    cells = [{"k_shot": k, "constraint_mode": mode, **_summary(vals)} for (k, mode), vals in results.items()]
    return {"kind": "few_shot", "config": cfg.to_dict(), "seeds": list(cfg.seeds),
            "feature_set": clf.features.label, "representation": clf.representation,
            "feature_dim": clf.features.dim(
                pretrained_dim(pretrained) if clf.representation == "encoded" else 256, table.dim),
            "cells": cells,
            "published_reference": {"label": "published R@20 (mean, std), VRD unless noted",
                                "values": PUBLISHED_REFERENCE["vrd_r20"], "vg200_ours": PUBLISHED_REFERENCE["vg200_r20_ours"]}}


def pretrained_dim(pretrained) -> int:
    if pretrained is None:
        return 256
    res = next(iter(pretrained.values())) if isinstance(pretrained, dict) else pretrained
    return res.encoder_config.model_dim


def report_table(report: dict) -> str:
    """Plain-text summary of a few-shot report."""
    lines = [f"{'k-shot':>6}  {'mode':<9} {'mean':>7} {'std':>7}"]
    for c in report["cells"]:
        lines.append(f"{c['k_shot']:>6}  {c['constraint_mode']:<9} {c['mean']:7.4f} {c['std']:7.4f}")
    return "\n".join(lines)
