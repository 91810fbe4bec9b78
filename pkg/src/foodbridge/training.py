"""Training loop, batch schedule and full-state checkpoints."""
from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import data
from .backbones import Backbones, build_backbones
from .bridge import BridgeParams, Example, init_optimizer, make_example, train_step
from .config import Config
from .numerics import AdamState

OPTIM_PREFIX = "optim/"


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Example indices for ``step``; depends only on ``(seed, step)`` so a resumed run sees the same batches."""
    if n < 1:
        raise ValueError("no training examples")
    rng = np.random.default_rng([seed, step])
    return rng.choice(n, size=min(batch_size, n), replace=False)


def load_examples(records: Sequence[data.RecipeRecord], bb: Backbones) -> list[Example]:
    shape = bb.config.image_shape
    return [make_example(data.load_image(rec, shape), rec.text, bb) for rec in records]


@dataclass
class TrainState:
    params: BridgeParams
    opt: dict[str, AdamState]
    step: int = 0

    @classmethod
    def fresh(cls, cfg: Config) -> "TrainState":
        params = BridgeParams.init(cfg)
        return cls(params, init_optimizer(params, cfg), 0)


def json_logger(stream=None) -> Callable[[dict], None]:
    stream = sys.stderr if stream is None else stream

    def log(row: dict) -> None:
        stream.write(json.dumps(row, sort_keys=True) + "\n")
        stream.flush()

    return log


def train(examples: Sequence[Example], bb: Backbones, state: TrainState, stop: int | None = None,
          log: Callable[[dict], None] | None = None) -> TrainState:
    """Run steps ``state.step .. stop - 1`` and return the advanced state."""
    cfg = state.params.config
    stop = cfg.steps if stop is None else stop
    params, opt = state.params, state.opt
    for step in range(state.step, stop):
        batch = [examples[i] for i in batch_indices(cfg.seed, step, len(examples), cfg.batch_size)]
        params, opt, report = train_step(batch, params, opt, bb, step=step)
        if log is not None:
            log({"step": step, **report})
    return TrainState(params, opt, max(stop, state.step))


# ---------------------------------------------------------------- checkpoints

def expected_shapes(config: dict) -> dict[str, tuple]:
    """Every tensor a checkpoint with this config echo must contain."""
    cfg = Config.from_dict(config)
    shapes = dict(Backbones.shapes(cfg, int(config["V"])))
    for name, shape in BridgeParams.shapes(cfg).items():
        shapes["bridge/" + name] = shape
        shapes[f"{OPTIM_PREFIX}m/{name}"] = shape
        shapes[f"{OPTIM_PREFIX}v/{name}"] = shape
    return shapes


def checkpoint_tensors(bb: Backbones, state: TrainState) -> dict[str, np.ndarray]:
    tensors = dict(bb.state_dict())
    tensors.update(state.params.state_dict())
    for name, st in state.opt.items():
        tensors[f"{OPTIM_PREFIX}m/{name}"] = st.m
        tensors[f"{OPTIM_PREFIX}v/{name}"] = st.v
    return tensors


def save(path, bb: Backbones, state: TrainState) -> None:
    cfg = state.params.config
    echo = {**cfg.to_dict(), "V": bb.vocab.V, "step": state.step}
    data.save_checkpoint(path, checkpoint_tensors(bb, state), echo)


def load(path) -> tuple[Backbones, TrainState]:
    tensors, echo = data.load_checkpoint(path, expected_shapes)
    cfg = Config.from_dict(echo)
    bb = Backbones.from_state_dict(tensors, cfg)
    if bb.vocab.V != echo["V"]:
        raise data.CheckpointError(f"checkpoint vocabulary size {echo['V']} does not match {bb.vocab.V}")
    params = BridgeParams.from_state_dict(tensors, cfg)
    step = int(echo["step"])
    opt = {name: AdamState(tensors[f"{OPTIM_PREFIX}m/{name}"], tensors[f"{OPTIM_PREFIX}v/{name}"], t=step,
                           lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
           for name in params.arrays}
    return bb, TrainState(params, opt, step)


def run(cfg: Config, corpus_path, out, resume=None, log: Callable[[dict], None] | None = None) -> TrainState:
    """Load the corpus, train on its 90% split and write a checkpoint to ``out``."""
    records = data.load_corpus(corpus_path)
    if resume is not None:
        bb, state = load(resume)
        if state.params.config.with_(steps=cfg.steps) != cfg:
            raise data.CheckpointError("resume checkpoint was trained with a different config")
        state = TrainState(BridgeParams(state.params.arrays, cfg), state.opt, state.step)
    else:
        bb = build_backbones(cfg.backbone_seed, cfg)
        state = TrainState.fresh(cfg)
    train_ids, _ = data.split_indices(len(records))
    examples = load_examples([records[i] for i in train_ids], bb)
    if log is not None:
        log({"event": "frozen", "sha256": bb.weights_hash(), "step": state.step})
    state = train(examples, bb, state, log=log)
    if log is not None:
        log({"event": "frozen", "sha256": bb.weights_hash(), "step": state.step})
    save(out, bb, state)
    return state
