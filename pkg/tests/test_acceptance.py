"""Acceptance criteria 1-9.

Two complete desk-scale pipelines (synth -> train -> eval) run once per session
in subprocesses; the criteria that need a trained model read their outputs.
Each test prints one PASS/FAIL line, collected again in the terminal summary.
"""
from __future__ import annotations

import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from foodbridge import data, evaluation, training
from foodbridge.backbones import Backbones
from foodbridge.bridge import BridgeParams, ParamTensors, batch_losses, generate_interleaved, recipe_nll
from foodbridge.config import TINY, Config
from foodbridge.metrics import rouge2, sacrebleu
from foodbridge.numerics import backward

from .conftest import random_backbones

VERDICTS: list[str] = []


def verdict(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number} {name}: {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, line


def _cli(*args, cwd: Path) -> subprocess.CompletedProcess:
    proc = subprocess.run([sys.executable, "-m", "foodbridge", *args], cwd=cwd, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr[-2000:]
    return proc


def _pipeline(root: Path) -> dict:
    root.mkdir(parents=True, exist_ok=True)
    _cli("synth", "--seed", "0", "--n", "512", "--out", "corpus", cwd=root)
    start = time.perf_counter()
    train = _cli("train", "--data", "corpus", "--out", "model.ckpt", cwd=root)
    train_seconds = time.perf_counter() - start
    reports = _cli("eval-i2t", "--ckpt", "model.ckpt", "--data", "corpus", cwd=root).stdout
    reports += _cli("eval-t2i", "--ckpt", "model.ckpt", "--data", "corpus", cwd=root).stdout
    log = [json.loads(line) for line in train.stderr.splitlines() if line.startswith("{")]
    return {"root": root, "ckpt": root / "model.ckpt", "corpus": root / "corpus" / "corpus.jsonl",
            "train_seconds": train_seconds, "log": log, "reports": reports}


@pytest.fixture(scope="session")
def run_a(tmp_path_factory):
    return _pipeline(tmp_path_factory.mktemp("desk") / "a")


@pytest.fixture(scope="session")
def run_b(tmp_path_factory, run_a):
    return _pipeline(tmp_path_factory.mktemp("desk") / "b")


@pytest.fixture(scope="session")
def trained(run_a):
    bb, state = training.load(run_a["ckpt"])
    held = evaluation.held_out(data.load_corpus(run_a["corpus"]))
    return bb, state, held


# ---------------------------------------------------------------- 1

def test_criterion_1_gradient_fidelity(tiny64):
    start = time.perf_counter()
    bb, params, examples = tiny64
    params = params.copy()
    names = sorted(params.arrays)
    leaves = params.leaves()
    losses = batch_losses(examples, ParamTensors(leaves, TINY.fw_heads), bb)
    analytic = [backward(loss.sum(), leaves) for loss in losses]

    def values():
        return [float(loss.data.sum()) for loss in batch_losses(examples, params, bb)]

    h, floor, worst, where, checked = 1e-5, 1e-6, 0.0, "", 0
    for name in names:
        flat = params.arrays[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = values()
            flat[i] = orig - h
            down = values()
            flat[i] = orig
            for which, (u, d) in enumerate(zip(up, down)):
                fd = (u - d) / (2 * h)
                g = analytic[which][name].reshape(-1)[i]
                rel = abs(g - fd) / max(abs(g), abs(fd), floor)
                checked += 1
                if rel > worst:
                    worst, where = rel, f"{('l_r', 'l_p', 'l_g')[which]} d/d {name}[{i}]"
    elapsed = time.perf_counter() - start
    verdict(1, "gradient fidelity", worst <= 1e-4 and elapsed < 60,
            f"max relative error {worst:.2e} at {where} over {checked} entries, {elapsed:.1f}s")


# ---------------------------------------------------------------- 2

def test_criterion_2_frozen_backbones(run_a):
    hashes = [row["sha256"] for row in run_a["log"] if row.get("event") == "frozen"]
    tensors, echo = data.load_checkpoint(run_a["ckpt"])
    on_disk = Backbones.from_state_dict(tensors, Config.from_dict(echo)).weights_hash()
    steps = sum(1 for row in run_a["log"] if "l_g" in row)
    ok = len(hashes) == 2 and hashes[0] == hashes[1] == on_disk and steps == 2000 and echo["step"] == 2000
    verdict(2, "frozen-ness", ok, f"sha256 {hashes[0][:16]}... before, after and in checkpoint; {steps} steps")


# ---------------------------------------------------------------- 3

def test_criterion_3_learning_signal(run_a):
    rows = [row for row in run_a["log"] if "l_g" in row]
    initial, final = rows[0]["l_g"], rows[-1]["l_g"]
    seconds = run_a["train_seconds"]
    verdict(3, "learning signal", final <= 0.5 * initial and seconds < 600,
            f"l_g {initial:.4f} -> {final:.4f} (ratio {final / initial:.3f}), train run {seconds:.0f}s")


# ---------------------------------------------------------------- 4

def test_criterion_4_visual_grounding(trained):
    bb, state, held = trained
    examples = training.load_examples(held, bb)
    visual = np.stack([ex.visual for ex in examples])
    tokens = [ex.tokens for ex in examples]
    matched = float(recipe_nll(visual, tokens, state.params, bb).data.mean())
    shuffled_visual = visual[np.roll(np.arange(len(examples)), 1)]
    shuffled = float(recipe_nll(shuffled_visual, tokens, state.params, bb).data.mean())
    gap = (shuffled - matched) / shuffled
    verdict(4, "visual grounding", gap >= 0.05,
            f"held-out l_r matched {matched:.3f} vs shuffled {shuffled:.3f} ({100 * gap:.1f}% lower), n={len(held)}")


# ---------------------------------------------------------------- 5

def test_criterion_5_t2i_improvement(trained):
    bb, state, held = trained
    after = evaluation.eval_t2i(held, state.params, bb)[0].value
    before = evaluation.eval_t2i(held, BridgeParams.init(state.params.config), bb)[0].value
    verdict(5, "t2i improvement", after > before,
            f"mean clip_similarity {before:.4f} at init -> {after:.4f} trained, n={len(held)}")


# ---------------------------------------------------------------- 6

def _contract_violations(tokens, n_images, vocab, m) -> tuple[int, int]:
    violations, runs, i = 0, 0, 0
    while i < len(tokens):
        t = tokens[i]
        if t == vocab.img(1):
            run = tokens[i:i + m]
            if run != [vocab.img(j) for j in range(1, m + 1)]:
                violations += 1
            runs += 1
            i += m
            continue
        if vocab.is_img(t):
            violations += 1  # [IMG_j], j > 1, outside a run
        i += 1
    if runs != n_images:
        violations += 1
    return violations, runs


def test_criterion_6_decode_contract():
    cfg = Config(e=16, d=8, k=2, m=4, L=4, r=8, H=4, W=4, lm_layers=1, lm_heads=2, fw_encoder_layers=1,
                 fw_decoder_layers=1, fw_heads=2, pretrain_steps=0)
    rng = np.random.default_rng(2024)
    total_violations = total_runs = sequences = 0
    for stub in range(10):
        bb = random_backbones(cfg, seed=stub)
        words = bb.vocab.words[3:bb.vocab.V]
        params = BridgeParams.init(cfg, seed=stub)
        params.arrays["E_img"] = params["E_img"] * rng.uniform(5, 60)
        for _ in range(100):
            prompt = [" ".join(rng.choice(words, size=rng.integers(1, 5)))]
            if rng.random() < 0.5:
                prompt.insert(0, rng.uniform(size=cfg.image_shape).astype(np.float32))
            gen = generate_interleaved(prompt, params, bb, max_tokens=int(rng.integers(1, 25)),
                                       temperature=float(rng.uniform(0.5, 2.0)), seed=int(rng.integers(1 << 30)))
            v, runs = _contract_violations(gen.tokens, len(gen.images), bb.vocab, cfg.m)
            total_violations += v
            total_runs += runs
            sequences += 1
    verdict(6, "decode contract", total_violations == 0 and total_runs > 0,
            f"{sequences} sequences, {total_runs} image runs, {total_violations} violations")


# ---------------------------------------------------------------- 7

def test_criterion_7_metric_oracles():
    refs = ["simple onion soup", "chop the garlic", "cook for ten minutes"]
    identity = sacrebleu(refs, refs)
    bp = sacrebleu(["a b c d"], ["a b c d e"])
    r = rouge2("a b c", "a b d")
    rng = np.random.default_rng(7)
    alphabet = list("abcde")
    dual_fail = 0
    for _ in range(100):
        a = " ".join(rng.choice(alphabet, size=rng.integers(0, 10)))
        b = " ".join(rng.choice(alphabet, size=rng.integers(0, 10)))
        dual_fail += rouge2(a, b).precision != rouge2(b, a).recall
    ok = (abs(identity - 100.0) <= 1e-9 and abs(bp - 77.880) <= 0.01
          and (r.precision, r.recall, r.f1) == (0.5, 0.5, 0.5) and dual_fail == 0)
    verdict(7, "metric oracles", ok,
            f"identity {identity:.9f}, BP example {bp:.4f}, rouge2 {(r.precision, r.recall, r.f1)}, "
            f"duality failures {dual_fail}/100")


# ---------------------------------------------------------------- 8

def test_criterion_8_determinism(run_a, run_b):
    same_ckpt = run_a["ckpt"].read_bytes() == run_b["ckpt"].read_bytes()
    same_reports = run_a["reports"] == run_b["reports"]
    same_corpus = (run_a["corpus"].read_bytes() == run_b["corpus"].read_bytes())
    verdict(8, "determinism", same_ckpt and same_reports and same_corpus,
            f"checkpoints identical: {same_ckpt}, reports identical: {same_reports} "
            f"({run_a['reports'].strip().replace(chr(10), ' | ')})")


# ---------------------------------------------------------------- 9

def test_criterion_9_persistence(run_a, trained, tmp_path):
    bb, state, _ = trained
    training.save(tmp_path / "again.ckpt", bb, state)
    ckpt_exact = (tmp_path / "again.ckpt").read_bytes() == run_a["ckpt"].read_bytes()

    rng = np.random.default_rng(9)
    tnsr_exact = True
    for shape in [(), (7,), (3, 4), (16, 16, 3), (2, 3, 4, 5)]:
        arr = rng.normal(size=shape).astype(np.float32)
        data.save_tensor(tmp_path / "t.tnsr", arr)
        back = data.load_tensor(tmp_path / "t.tnsr")
        tnsr_exact &= back.shape == arr.shape and back.tobytes() == arr.tobytes()
    image_file = Path(data.load_corpus(run_a["corpus"])[0].image_path)
    data.save_tensor(tmp_path / "img.tnsr", data.load_tensor(image_file))
    tnsr_exact &= (tmp_path / "img.tnsr").read_bytes() == image_file.read_bytes()

    records = data.load_corpus(run_a["corpus"])
    train_ids, _ = data.split_indices(len(records))
    examples = training.load_examples([records[i] for i in train_ids], bb)
    cfg = state.params.config
    full_log, resumed_log = [], []
    training.train(examples, bb, training.TrainState.fresh(cfg), stop=6, log=full_log.append)
    half = training.train(examples, bb, training.TrainState.fresh(cfg), stop=3)
    training.save(tmp_path / "half.ckpt", bb, half)
    bb2, loaded = training.load(tmp_path / "half.ckpt")
    training.train(examples, bb2, loaded, stop=6, log=resumed_log.append)
    worst = max(abs(a[k] - b[k]) for a, b in zip(full_log[3:], resumed_log) for k in ("l_r", "l_p", "l_g", "total"))
    verdict(9, "persistence", ckpt_exact and tnsr_exact and worst <= 1e-6,
            f"checkpoint bit-exact {ckpt_exact}, TNSR bit-exact {tnsr_exact}, "
            f"resume max loss difference {worst:.2e} over steps 3-5")
