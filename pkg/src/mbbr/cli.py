"""Command-line entry point: ``mbbr <command> [options]``.

Commands
--------
synth             write a synthetic scene file (+ manifest)
pretrain          masked-reconstruction (or classification) pretraining -> checkpoint + log
finetune          train one k-shot predicate classifier -> classifier checkpoint + report
eval              few-shot R@N over several seeds -> report
ablate            mask-ratio, loss-kind and feature-set sweeps -> one report each
export-attention  per-layer, per-head attention maps of a checkpoint -> JSON

Configuration is a JSON file (``--config``) whose sections mirror the library
configs; command-line flags override the file, which overrides the defaults::

    {"seed": 0, "precision": "f64", "scenes": null, "labels": null,
     "synthetic": {...SyntheticConfig...}, "pretrain": {...PretrainConfig...},
     "encoder": {...EncoderConfig...},
     "classifier": {...FewShotConfig..., "features": {"use_visual": true, ...}},
     "eval": {"k_shots": [10], "seeds": [0, 1, 2, 3, 4], "recall_n": 20, ...},
     "ablate": {"ratios": [0.1, 0.25, 0.5, 0.75, 0.9], "seeds": [0], "sweeps": [...]}}

The top-level ``seed`` is the only seed: the generator, pretraining and the
classifier each derive their own random streams from it. ``eval.seeds`` is
the list of repetitions a report averages over. Scene files are validated
against ``synthetic.num_categories`` / ``synthetic.num_predicates``.

Exit status
-----------
0  success
1  unexpected internal error
2  configuration or usage error
3  data error (malformed or missing input, too few k-shot samples, bad checkpoint)
4  numeric failure (non-finite values during training)
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from . import autodiff as ad
from .checkpoint import atomic_write_bytes
from .encoder import EncoderConfig, PaddedBatch, attention_export, attention_scores
from .errors import ConfigError, DataError, DimensionError, NumericError
from .evaluation import (DEFAULT_RATIOS, EvalConfig, cached_pretrain, evaluate_few_shot, mask_ratio_sweep,
                         recall_modes, report_table, split_scenes, sweep_chart)
from .fewshot import (FeatureAblationConfig, FewShotConfig, encoded_provider, predict_scenes, raw_provider,
                      train_few_shot)
from .metrics import recall_at
from .pretrain import (MaskPlan, PretrainConfig, assemble, entity_embeddings, load_pretrained, pretrain,
                       save_pretrained)
from .scenes import build_label_embeddings, load_scenes, sample_k_shot, write_scenes
from .synthetic import SyntheticConfig, generate

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

SWEEPS = ("mask_ratio", "loss_kind", "features")

DEFAULTS = {
    "seed": 0,
    "precision": "f64",
    "scenes": None,
    "labels": None,
    "synthetic": {k: v for k, v in SyntheticConfig().to_dict().items() if k != "seed"},
    "pretrain": {k: v for k, v in PretrainConfig().to_dict().items() if k != "seed"},
    "encoder": EncoderConfig().to_dict(),
    "classifier": {k: v for k, v in FewShotConfig().to_dict().items() if k != "seed"},
    "eval": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(EvalConfig()).items()
             if k != "classifier"},
    "ablate": {"ratios": list(DEFAULT_RATIOS), "seeds": [0], "sweeps": list(SWEEPS)},
}


# -- configuration ------------------------------------------------------------------

def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        path = f"{where}{key}"
        if key not in base:
            hint = " (use the top-level seed)" if key == "seed" else ""
            raise ConfigError(f"unknown config key {path!r}{hint}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def resolve_config(path: str | None, overrides: dict) -> dict:
    """Defaults <- JSON file <- flag overrides (``{"section.key": value}``)."""
    cfg = json.loads(json.dumps(DEFAULTS))
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path!r}: {exc.strerror}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path!r} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, data)
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = cfg
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = value
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _build(cls, section: dict, **extra):
    try:
        return cls(**section, **extra)
    except TypeError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def synthetic_config(cfg) -> SyntheticConfig:
    sc = _build(SyntheticConfig, cfg["synthetic"], seed=cfg["seed"])
    sc.validate()
    return sc


def pretrain_config(cfg) -> PretrainConfig:
    return _build(PretrainConfig, cfg["pretrain"], seed=cfg["seed"])


def encoder_config(cfg) -> EncoderConfig:
    return _build(EncoderConfig, cfg["encoder"])


def classifier_config(cfg) -> FewShotConfig:
    section = dict(cfg["classifier"])
    features = _build(FeatureAblationConfig, section.pop("features") or {})
    return _build(FewShotConfig, section, seed=cfg["seed"], features=features)


def eval_config(cfg) -> EvalConfig:
    section = dict(cfg["eval"])
    for key in ("k_shots", "seeds"):
        if key in section:
            section[key] = tuple(section[key])
    if not section.get("seeds"):
        raise ConfigError("eval.seeds must not be empty")
    return _build(EvalConfig, section, classifier=classifier_config(cfg))


# -- shared helpers ---------------------------------------------------------------------

def dump_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, command: str, cfg: dict, outputs: dict, **extra) -> None:
    dump_json(path, {"command": command, "version": __version__, "config": cfg, "config_hash": config_hash(cfg),
                     "seed": cfg["seed"], "outputs": {k: _sha256(v) for k, v in outputs.items()}, **extra})


def dataset(cfg: dict):
    sc = synthetic_config(cfg)
    if cfg["scenes"]:
        path = Path(cfg["scenes"])
        if not path.is_file():
            raise DataError(f"scene file {str(path)!r} does not exist")
        return load_scenes(path, sc.num_categories, sc.num_predicates), sc
    return generate(sc).scenes, sc


def label_table(cfg: dict, num_categories: int):
    return build_label_embeddings(num_categories, cfg["labels"], seed=cfg["eval"]["label_seed"])


def _say(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _epoch_progress(epoch: int, loss: float) -> None:
    _say(f"epoch {epoch:3d}  loss {loss:.6f}")


# -- commands -------------------------------------------------------------------------

def cmd_synth(cfg: dict, out: Path) -> int:
    sc = synthetic_config(cfg)
    scenes = generate(sc).scenes
    write_scenes(out, scenes)
    write_manifest(out.with_name(out.name + ".manifest.json"), "synth", cfg, {"scenes": out},
                   num_scenes=len(scenes), num_triplets=sum(len(s.relationships) for s in scenes))
    _say(f"wrote {len(scenes)} scenes to {out}")
    return EXIT_OK


def cmd_pretrain(cfg: dict, out: Path) -> int:
    scenes, sc = dataset(cfg)
    train, _ = split_scenes(scenes, cfg["eval"]["train_fraction"])
    pcfg, ecfg = pretrain_config(cfg), encoder_config(cfg)
    res = pretrain(train, pcfg, ecfg, num_categories=sc.num_categories, progress=_epoch_progress)
    out.mkdir(parents=True, exist_ok=True)
    save_pretrained(out / "model.ckpt", res, {"config": cfg, "config_hash": config_hash(cfg)})
    dump_json(out / "log.json", {"config": cfg, "losses": res.history, **res.log})
    write_manifest(out / "manifest.json", "pretrain", cfg, {"model.ckpt": out / "model.ckpt"},
                   num_train_scenes=len(train), first_loss=res.history[0] if res.history else None,
                   final_loss=res.history[-1] if res.history else None)
    return EXIT_OK


def _providers(cfg: dict, checkpoints: list[str], clf: FewShotConfig, seeds):
    needs = clf.features.use_visual and clf.representation == "encoded"
    if not needs:
        return None
    if not checkpoints:
        raise ConfigError("encoded representations need --checkpoint")
    loaded = [load_pretrained(p) for p in checkpoints]
    if len(loaded) == 1:
        return loaded[0]
    if len(loaded) != len(seeds):
        raise ConfigError(f"{len(loaded)} checkpoints given for {len(seeds)} seeds; pass one or one per seed")
    return dict(zip(seeds, loaded))


def cmd_finetune(cfg: dict, out: Path, checkpoints: list[str]) -> int:
    scenes, sc = dataset(cfg)
    ecfg_ = eval_config(cfg)
    clf = ecfg_.classifier
    train, test = split_scenes(scenes, ecfg_.train_fraction)
    k = ecfg_.k_shots[0]
    table = label_table(cfg, sc.num_categories)
    pre = _providers(cfg, checkpoints, clf, [cfg["seed"]])
    if pre is not None:
        provider = encoded_provider(pre.fusion, pre.encoder, pre.encoder_config, pre.config.mask_token)
        encoder = (pre.fusion, pre.encoder, pre.encoder_config)
    else:
        provider, encoder = raw_provider(), None
    samples = sample_k_shot(train, k, sc.num_predicates, cfg["seed"])
    res = train_few_shot(samples, list(train) + list(test), provider, table, sc.num_predicates, clf, encoder)
    if encoder is not None and not clf.freeze_encoder:
        provider = encoded_provider(*encoder, pre.config.mask_token)
    preds = predict_scenes(test, res.weights, provider, table, clf.features)
    recall = {m: recall_at(preds, test, rc)
              for m, rc in recall_modes(sc.num_predicates, ecfg_.recall_n, ecfg_.average).items()}
    out.mkdir(parents=True, exist_ok=True)
    res.weights.save(out / "classifier.ckpt", {"kind": "mbbr_classifier", "config": cfg,
                                               "config_hash": config_hash(cfg), "k_shot": k})
    report = {"kind": "finetune", "config": cfg, "config_hash": config_hash(cfg), "k_shot": k,
              "num_samples": len(samples), "history": res.history, "train_accuracy": res.train_accuracy,
              "held_out_recall": recall, "recall_n": ecfg_.recall_n}
    dump_json(out / "report.json", report)
    write_manifest(out / "manifest.json", "finetune", cfg,
                   {"classifier.ckpt": out / "classifier.ckpt", "report.json": out / "report.json"})
    _say(f"train accuracy {res.train_accuracy:.4f}; held-out R@{ecfg_.recall_n} "
         + " ".join(f"{m}={v:.4f}" for m, v in recall.items()))
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path, checkpoints: list[str]) -> int:
    scenes, sc = dataset(cfg)
    ecfg_ = eval_config(cfg)
    pre = _providers(cfg, checkpoints, ecfg_.classifier, ecfg_.seeds)
    report = evaluate_few_shot(scenes, sc.num_predicates, ecfg_, pre, label_table(cfg, sc.num_categories), _say)
    report["resolved_config"] = cfg
    report["config_hash"] = config_hash(cfg)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(out / "report.json", report)
    write_manifest(out / "manifest.json", "eval", cfg, {"report.json": out / "report.json"})
    print(report_table(report))
    return EXIT_OK


def cmd_ablate(cfg: dict, out: Path) -> int:
    scenes, sc = dataset(cfg)
    ab = cfg["ablate"]
    unknown = set(ab["sweeps"]) - set(SWEEPS)
    if unknown:
        raise ConfigError(f"unknown sweeps {sorted(unknown)}; choose from {list(SWEEPS)}")
    seeds = tuple(ab["seeds"])
    if not seeds:
        raise ConfigError("ablate.seeds must not be empty")
    pcfg, enc = pretrain_config(cfg), encoder_config(cfg)
    ecfg_ = replace(eval_config(cfg), seeds=seeds)
    train, _ = split_scenes(scenes, ecfg_.train_fraction)
    table = label_table(cfg, sc.num_categories)
    cache: dict = {}
    out.mkdir(parents=True, exist_ok=True)
    written = {}

    def runs(loss_kind):
        return {s: cached_pretrain(train, replace(pcfg, seed=s, loss_kind=loss_kind), enc, cache,
                                   sc.num_categories) for s in seeds}

    def few_shot(pre, clf):
        return evaluate_few_shot(scenes, sc.num_predicates, replace(ecfg_, classifier=clf), pre, table, _say)

    for sweep in ab["sweeps"]:
        if sweep == "mask_ratio":
            report = mask_ratio_sweep(scenes, ab["ratios"], pcfg, enc, seeds, ecfg_.train_fraction, cache, _say)
            print(sweep_chart(report))
        elif sweep == "loss_kind":
            rows = [{"loss_kind": kind, **few_shot(runs(kind), ecfg_.classifier)}
                    for kind in ("reconstruction", "classification")]
            report = {"kind": "loss_kind_sweep", "rows": rows}
        else:
            base = ecfg_.classifier
            rows = [few_shot(None, replace(base, features=FeatureAblationConfig(False, True, True))),
                    few_shot(runs("reconstruction"), replace(base, features=FeatureAblationConfig(True, True, True)))]
            report = {"kind": "feature_sweep", "rows": rows}
        report["resolved_config"] = cfg
        report["config_hash"] = config_hash(cfg)
        path = out / f"{sweep}.json"
        dump_json(path, report)
        written[path.name] = path
    write_manifest(out / "manifest.json", "ablate", cfg, written)
    return EXIT_OK


def cmd_export_attention(cfg: dict, out: Path, checkpoints: list[str], scene_ids: list[str], limit: int) -> int:
    if len(checkpoints) != 1:
        raise ConfigError("export-attention needs exactly one --checkpoint")
    pre = load_pretrained(checkpoints[0])
    scenes, _ = dataset(cfg)
    if scene_ids:
        by_id = {s.scene_id: s for s in scenes}
        missing = [i for i in scene_ids if i not in by_id]
        if missing:
            raise DataError(f"unknown scene ids {missing}")
        chosen = [by_id[i] for i in scene_ids]
    else:
        chosen = [s for s in scenes if s.num_entities][:limit]
    exported = []
    for s in chosen:
        inp = assemble([s], [MaskPlan([False] * s.num_entities)])
        with ad.no_grad():
            fe = entity_embeddings(inp, pre.fusion, pre.config.mask_token)
            maps = attention_scores(PaddedBatch(fe, inp.real), pre.encoder, pre.encoder_config)
        exported.append(attention_export(s.scene_id, maps, 0, s.num_entities))
    dump_json(out, {"kind": "attention", "config": cfg, "config_hash": config_hash(cfg),
                    "checkpoint_sha256": _sha256(checkpoints[0]), "scenes": exported})
    _say(f"exported attention for {len(exported)} scenes to {out}")
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mbbr", description=__doc__.split("\n")[0],
                                     epilog="Exit codes: 0 ok, 1 internal, 2 config, 3 data, 4 numeric.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text, scenes=True, checkpoint=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
        p.add_argument("--out", required=True, help="output path")
        p.add_argument("--precision", choices=("f32", "f64"), help="arithmetic precision (default f64)")
        if scenes:
            p.add_argument("--scenes", help="scene JSONL file (default: generate from the synthetic config)")
        if checkpoint:
            p.add_argument("--checkpoint", action="append", default=[],
                           help="pretraining checkpoint (repeat to give one per eval seed)")
        return p

    p = command("synth", "write a synthetic scene file", scenes=False)
    p.add_argument("--num-scenes", type=int)
    p = command("pretrain", "pretrain fusion + encoder weights")
    p.add_argument("--epochs", type=int)
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--loss-kind", choices=("reconstruction", "classification"))
    for name, text in (("finetune", "train one k-shot classifier"), ("eval", "few-shot evaluation over seeds")):
        p = command(name, text, checkpoint=True)
        p.add_argument("--k-shot", type=int, action="append", help="k (repeatable for eval)")
        p.add_argument("--representation", choices=("encoded", "raw"))
    p = command("ablate", "mask-ratio / loss-kind / feature-set sweeps")
    p.add_argument("--sweep", action="append", choices=SWEEPS, help="restrict to these sweeps")
    p = command("export-attention", "dump attention maps", checkpoint=True)
    p.add_argument("--scene-id", action="append", default=[])
    p.add_argument("--limit", type=int, default=10, help="number of scenes when no --scene-id is given")
    return parser


def _overrides(args) -> dict:
    get = lambda name: getattr(args, name, None)
    return {
        "seed": args.seed,
        "precision": args.precision,
        "scenes": get("scenes"),
        "synthetic.num_scenes": get("num_scenes"),
        "pretrain.epochs": get("epochs"),
        "pretrain.mask_ratio": get("mask_ratio"),
        "pretrain.loss_kind": get("loss_kind"),
        "eval.k_shots": get("k_shot"),
        "classifier.representation": get("representation"),
        "ablate.sweeps": get("sweep"),
    }


def run(args) -> int:
    cfg = resolve_config(args.config, _overrides(args))
    if cfg["precision"] not in ("f32", "f64"):
        raise ConfigError("precision must be 'f32' or 'f64'")
    out = Path(args.out)
    with ad.precision(cfg["precision"]):
        if args.command == "synth":
            return cmd_synth(cfg, out)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, out)
        if args.command == "finetune":
            return cmd_finetune(cfg, out, args.checkpoint)
        if args.command == "eval":
            return cmd_eval(cfg, out, args.checkpoint)
        if args.command == "ablate":
            return cmd_ablate(cfg, out)
        return cmd_export_attention(cfg, out, args.checkpoint, args.scene_id, args.limit)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConfigError as exc:
        _say(f"config error: {exc}")
        return EXIT_CONFIG
    except NumericError as exc:
        _say(f"numeric error: {exc}")
        return EXIT_NUMERIC
    except (DataError, DimensionError) as exc:
        _say(f"data error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
