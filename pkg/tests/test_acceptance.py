"""Acceptance criteria, one test per criterion.

Each test prints a single ``[PASS]`` / ``[FAIL]`` line with the measured
quantities, then asserts. Run on its own with

    pytest tests/test_acceptance.py -v -s

Criteria 5-8 need 35 pretraining runs. By default they use a 2-layer encoder
(otherwise the default configuration) so the module finishes in roughly a
quarter of an hour on one CPU core; set ``MBBR_ACCEPT_LAYERS=6`` to run them
with the full 6-layer encoder. Criterion 4 always uses the full encoder.
"""

import json
import os
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

import fdcheck
import recall_oracle
from mbbr import autodiff as ad
from mbbr.encoder import EncoderConfig, EncoderWeights, PaddedBatch, attention_scores, encode
from mbbr.evaluation import EvalConfig, evaluate_few_shot, masked_top1_probe, split_scenes
from mbbr.fewshot import FeatureAblationConfig, FewShotConfig
from mbbr.metrics import RecallConfig, recall_at
from mbbr.pretrain import PretrainConfig, draw_mask, infer, pretrain, stream
from mbbr.scenes import load_scenes, write_scenes
from mbbr.errors import DataError
from mbbr.synthetic import SyntheticConfig, generate

SEEDS = (0, 1, 2, 3, 4)
RATIOS = (0.10, 0.25, 0.50, 0.75, 0.90)
LAYERS = int(os.environ.get("MBBR_ACCEPT_LAYERS", "2"))
DESK_ENCODER = EncoderConfig(num_layers=LAYERS)


def verdict(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}", flush=True)
    assert ok, detail


# -- shared experiment state (pretraining is the expensive part) -------------------

class Lab:
    def __init__(self):
        self.runs = {}
        self.data = {}

    def dataset(self, alpha: float = 1.0):
        if alpha not in self.data:
            self.data[alpha] = generate(SyntheticConfig(context_strength=alpha))
        return self.data[alpha]

    def pretrained(self, seed: int, ratio: float = 0.5, alpha: float = 1.0, loss_kind: str = "reconstruction"):
        key = (seed, ratio, alpha, loss_kind)
        if key not in self.runs:
            ds = self.dataset(alpha)
            train, _ = split_scenes(ds.scenes)
            cfg = PretrainConfig(seed=seed, mask_ratio=ratio, loss_kind=loss_kind)
            self.runs[key] = pretrain(train, cfg, DESK_ENCODER, num_categories=ds.config.num_categories)
        return self.runs[key]


@pytest.fixture(scope="module")
def lab():
    return Lab()


# -- 1 -------------------------------------------------------------------------------

def test_criterion_1_gradients(capsys):
    t0 = time.perf_counter()
    worst = {}
    for name, build, tensors in fdcheck.op_cases(seed=3):
        worst[name] = fdcheck.check(build, tensors)
    for kind in ("reconstruction", "classification"):
        build, tensors = fdcheck.pipeline_case(seed=3, loss_kind=kind)
        worst[f"pipeline/{kind}"] = fdcheck.check(build, tensors, max_entries=8)
    elapsed = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < 1e-4 and elapsed < 120
    verdict(capsys, 1, ok, f"{len(worst)} checks, max rel err {err:.2e} ({name}) < 1e-4; {elapsed:.1f}s < 120s")


# -- 2 -------------------------------------------------------------------------------

def test_criterion_2_recall_oracle(capsys):
    rng = np.random.default_rng(2024)
    mismatches = mono_n = mono_k = 0
    example = None
    for _ in range(200):
        inst, K = recall_oracle.random_instance(rng, max_pairs=5, max_predicates=6)
        preds = {s.scene_id: p for s, p in inst}
        scenes = [s for s, _ in inst]
        total = sum(len(p) for p in preds.values()) * K
        table = {}
        for k in range(1, K + 1):
            for n in range(1, total + 2):
                got = recall_at(preds, scenes, RecallConfig(k, n))
                table[k, n] = got
                if got != recall_oracle.oracle_recall(inst, k, n):
                    mismatches += 1
        for (k, n), v in table.items():
            if n > 1 and v < table[k, n - 1]:
                mono_n += 1
            if k > 1 and v < table[k - 1, n]:
                mono_k += 1
                example = example or (k, n, v, table[k - 1, n])
    ok = mismatches == 0 and mono_n == 0 and mono_k == 0
    detail = (f"oracle mismatches {mismatches}/200 instances; monotone-in-N violations {mono_n}; "
              f"monotone-in-k violations {mono_k}")
    if example:
        detail += (f" (e.g. k={example[0]}, N={example[1]}: {example[2]:.3f} < {example[3]:.3f} at k-1; "
                   "a larger k adds candidates that can push another pair's top-1 out of the N budget)")
    verdict(capsys, 2, ok, detail)


# -- 3 -------------------------------------------------------------------------------

def test_criterion_3_encoder_properties(capsys):
    cfg = EncoderConfig(num_layers=2, num_heads=4, model_dim=32, ffn_dim=64)
    worst_perm = worst_pad = 0.0
    for trial in range(10):
        rng = np.random.default_rng(trial)
        w = EncoderWeights.init(cfg, rng)
        n = int(rng.integers(2, 8))
        x = rng.standard_normal((1, n, 32))
        with ad.no_grad():
            z = encode(PaddedBatch(ad.Tensor(x), np.ones((1, n), bool)), w, cfg).data
            perm = rng.permutation(n)
            zp = encode(PaddedBatch(ad.Tensor(x[:, perm]), np.ones((1, n), bool)), w, cfg).data
            worst_perm = max(worst_perm, float(np.abs(zp - z[:, perm]).max()))
            pad = int(rng.integers(1, 5))
            xpad = np.concatenate([x, 100 * rng.standard_normal((1, pad, 32))], axis=1)
            mask = np.r_[np.ones(n, bool), np.zeros(pad, bool)][None]
            zpad = encode(PaddedBatch(ad.Tensor(xpad), mask), w, cfg).data
            worst_pad = max(worst_pad, float(np.abs(zpad[:, :n] - z).max()))
    ok = worst_perm < 1e-9 and worst_pad < 1e-9
    verdict(capsys, 3, ok, f"permutation dev {worst_perm:.1e}, padding dev {worst_pad:.1e} (< 1e-9)")


# -- 4 -------------------------------------------------------------------------------

def test_criterion_4_pretraining_converges(capsys):
    scenes = generate(SyntheticConfig()).scenes
    t0 = time.perf_counter()
    res = pretrain(scenes, PretrainConfig(seed=0), EncoderConfig())
    elapsed = time.perf_counter() - t0
    ratio = res.history[-1] / res.history[0]
    ok = len(res.history) == 30 and ratio < 0.2 and elapsed < 15 * 60
    verdict(capsys, 4, ok, f"6-layer encoder, 500 scenes: MSE {res.history[0]:.4f} -> {res.history[-1]:.4f} "
                           f"(ratio {ratio:.3f} < 0.2) in {elapsed:.0f}s")


# -- 5 -------------------------------------------------------------------------------

def masked_slot_errors(lab, alpha: float, seed: int):
    """Per-masked-entity mean squared error of the model and of the train-mean predictor."""
    ds = lab.dataset(alpha)
    train, test = split_scenes(ds.scenes)
    res = lab.pretrained(seed, 0.5, alpha)
    rng = stream(seed, "mask", 51)
    plans = [draw_mask(s, 0.5, rng) for s in test]
    _, ys = infer(test, res.fusion, res.encoder, res.encoder_config, plans)
    mean = np.concatenate([s.features() for s in train]).mean(axis=0)
    model, baseline = [], []
    for s, plan, y in zip(test, plans, ys):
        f = s.features()[plan.masked]
        model.extend(((y[plan.masked] - f) ** 2).mean(axis=1))
        baseline.extend(((f - mean) ** 2).mean(axis=1))
    return np.array(model), np.array(baseline)


def analytic_floor_alpha0(ds) -> float:
    # Categories are uniform and the context term vanishes, so the best constant
    # prediction is the prototype mean and its error is prototype spread + noise.
    p = ds.world.prototypes
    return float(((p - p.mean(axis=0)) ** 2).mean() + ds.config.feature_noise ** 2)


def test_criterion_5_context_signal(lab, capsys):
    floor0 = analytic_floor_alpha0(lab.dataset(0.0))
    err0, se0, err1, base1 = [], [], [], []
    for seed in SEEDS:
        m0, _ = masked_slot_errors(lab, 0.0, seed)
        err0.append(m0.mean())
        se0.append(m0.std() / np.sqrt(len(m0)))
        m1, b1 = masked_slot_errors(lab, 1.0, seed)
        err1.append(m1.mean())
        base1.append(b1.mean())
    e0, se = float(np.mean(err0)), float(np.mean(se0))
    lo, hi = floor0 - 3 * se, 1.2 * floor0
    gain = 1 - float(np.mean(err1)) / float(np.mean(base1))
    ok = lo <= e0 <= hi and gain >= 0.2
    verdict(capsys, 5, ok, f"alpha=0: error {e0:.4f} in [{lo:.4f}, {hi:.4f}] (floor {floor0:.4f} - 3SE, 1.2 floor); "
                           f"alpha=1: error {np.mean(err1):.4f} vs mean-prediction {np.mean(base1):.4f} "
                           f"-> {100 * gain:.1f}% better (>= 20%)")


# -- 6 -------------------------------------------------------------------------------

def test_criterion_6_mask_ratio_shape(lab, capsys):
    scenes = lab.dataset(1.0).scenes
    means = {}
    for r in RATIOS:
        accs = [masked_top1_probe(scenes, lab.pretrained(seed, r), r, seed).accuracy for seed in SEEDS]
        means[r] = float(np.mean(accs))
    ok = means[0.5] >= means[0.1] and means[0.5] >= means[0.9]
    verdict(capsys, 6, ok, "probe accuracy " + ", ".join(f"{r:.2f}: {a:.4f}" for r, a in means.items())
            + " (need 0.50 >= 0.10 and >= 0.90)")


# -- 7 and 8 -------------------------------------------------------------------------

def few_shot_mean(lab, clf: FewShotConfig, loss_kind: str | None = "reconstruction") -> float:
    ds = lab.dataset(1.0)
    pre = None if loss_kind is None else {s: lab.pretrained(s, 0.5, 1.0, loss_kind) for s in SEEDS}
    rep = evaluate_few_shot(ds.scenes, ds.config.num_predicates,
                            EvalConfig(k_shots=(10,), seeds=SEEDS, recall_n=20, classifier=clf), pre)
    cell = next(c for c in rep["cells"] if c["constraint_mode"] == "graph")
    return cell["mean"]


def test_criterion_7_table_direction(lab, capsys):
    encoded = few_shot_mean(lab, FewShotConfig())
    raw = few_shot_mean(lab, FewShotConfig(representation="raw"), None)
    ls = few_shot_mean(lab, FewShotConfig(features=FeatureAblationConfig(use_visual=False)), None)
    ok = encoded > raw and encoded >= ls
    verdict(capsys, 7, ok, f"10-shot R@20 (graph, 5 seeds): encoded L+S+V {encoded:.4f} vs raw L+S+V {raw:.4f} "
                           f"(need >); vs L+S {ls:.4f} (need >=)")


def test_criterion_8_loss_ablation(lab, capsys):
    recon = few_shot_mean(lab, FewShotConfig(), "reconstruction")
    cls = few_shot_mean(lab, FewShotConfig(), "classification")
    verdict(capsys, 8, recon >= cls, f"10-shot R@20 (graph, 5 seeds): reconstruction pretraining {recon:.4f} "
                                     f"vs classification pretraining {cls:.4f} (need >=)")


# -- 9 -------------------------------------------------------------------------------

def _cli(*args, cwd):
    return subprocess.run([sys.executable, "-m", "mbbr.cli", *args], cwd=cwd, capture_output=True, text=True)


def test_criterion_9_determinism(tmp_path, capsys):
    cfg = {"synthetic": {"num_scenes": 40}, "pretrain": {"epochs": 2},
           "encoder": {"num_layers": 1, "num_heads": 2, "model_dim": 16, "ffn_dim": 32},
           "classifier": {"epochs": 2, "hidden": 16}, "eval": {"k_shots": [2], "seeds": [0, 1]},
           "ablate": {"ratios": [0.5], "seeds": [0]}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    outputs = {}
    # Both runs issue the same commands with the same relative paths, each in
    # its own directory, so the resolved configs are identical.
    for run in ("a", "b"):
        out = tmp_path / run
        out.mkdir()
        steps = [("synth", "--out", "scenes.jsonl"),
                 ("pretrain", "--scenes", "scenes.jsonl", "--out", "pre"),
                 ("finetune", "--scenes", "scenes.jsonl", "--checkpoint", "pre/model.ckpt", "--k-shot", "2",
                  "--out", "ft"),
                 ("eval", "--scenes", "scenes.jsonl", "--checkpoint", "pre/model.ckpt", "--out", "eval"),
                 ("ablate", "--scenes", "scenes.jsonl", "--out", "ablate"),
                 ("export-attention", "--scenes", "scenes.jsonl", "--checkpoint", "pre/model.ckpt",
                  "--out", "attn.json")]
        for step in steps:
            proc = _cli(step[0], "--config", str(tmp_path / "cfg.json"), "--seed", "7", *step[1:], cwd=out)
            assert proc.returncode == 0, proc.stderr
        outputs[run] = {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
    # Wall-clock timings are the one legitimately varying field; they live only in the training logs.
    compared = [p for p in outputs["a"] if not p.name.endswith("log.json")]
    differing = [str(p) for p in compared if outputs["a"][p] != outputs["b"].get(p)]
    ok = bool(compared) and not differing and set(outputs["a"]) == set(outputs["b"])
    verdict(capsys, 9, ok, f"{len(compared)} artifacts from 6 commands byte-identical across two runs"
            + (f"; differing: {differing}" if differing else ""))


# -- 10 ------------------------------------------------------------------------------

def test_criterion_10_round_trip(tmp_path, capsys):
    ds = generate(SyntheticConfig(num_scenes=1000, min_entities=0, max_entities=6, seed=11))
    path = tmp_path / "scenes.jsonl"
    write_scenes(path, ds.scenes)
    back = load_scenes(path)
    lossless = back == ds.scenes
    lines = path.read_text().splitlines()
    bad = json.loads(lines[536])
    bad["entities"] = bad["entities"] or [{"category_id": 0, "box": [0, 0, 1, 1], "feature": [0.0] * 256}]
    bad["entities"][0]["box"] = [50, 10, 20, 30]
    lines[536] = json.dumps(bad)
    path.write_text("\n".join(lines) + "\n")
    try:
        load_scenes(path)
        located = False
        message = "no error raised"
    except DataError as exc:
        located = exc.line == 537 and str(exc).startswith("line 537:")
        message = str(exc)
    ok = lossless and located
    verdict(capsys, 10, ok, f"1000 scenes round-trip lossless={lossless}; corrupt record reported as {message!r}")
