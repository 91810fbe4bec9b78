from __future__ import annotations

import numpy as np
import pytest

from foodbridge import data
from foodbridge.backbones import (Backbones, FrozenImageDecoder, FrozenLM, FrozenTextEncoder, FrozenVisualEncoder,
                                  Vocab, build_backbones)
from foodbridge.bridge import BridgeParams, make_example
from foodbridge.config import TINY, Config

# small enough for subprocess CLI tests, but images keep the corpus' 16x16x3 shape
SMALL = Config(e=16, d=8, k=2, m=2, L=4, r=8, lm_layers=1, lm_heads=2, fw_encoder_layers=1, fw_decoder_layers=1,
               fw_heads=2, pretrain_steps=0, steps=4, batch_size=4, max_new_tokens=12)


def random_backbones(cfg: Config, seed: int) -> Backbones:
    """Untrained frozen components with a random linear image decoder."""
    rng = np.random.default_rng(seed)
    vocab = Vocab.from_grammar(cfg.m)
    lm = FrozenLM.init(cfg, vocab.V, rng)
    visual = FrozenVisualEncoder.init(cfg, rng)
    text = FrozenTextEncoder.init(cfg, vocab.V, rng)
    n_in, n_out = cfg.L * cfg.r, int(np.prod(cfg.image_shape))
    decoder = FrozenImageDecoder(rng.normal(0, 0.1, (n_in, n_out)).astype(np.float32),
                                 np.zeros(n_out, np.float32), cfg.L, cfg.r, cfg.image_shape)
    return Backbones(vocab, lm, visual, text, decoder, cfg)


@pytest.fixture(scope="session")
def tiny_bb():
    return build_backbones(0, TINY)


@pytest.fixture(scope="session")
def tiny64(tiny_bb):
    """Tiny backbones and bridge in float64, plus two training examples."""
    bb = tiny_bb.astype(np.float64)
    params = BridgeParams.init(TINY).astype(np.float64)
    samples = data.make_samples(5, 2, TINY.image_shape)
    examples = [make_example(img, rec.text, bb) for rec, img in samples]
    for ex in examples:
        ex.visual = ex.visual.astype(np.float64)
        ex.target = ex.target.astype(np.float64)
    return bb, params, examples


@pytest.fixture(scope="session")
def small_bb():
    return build_backbones(0, SMALL)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    data.synth_corpus(11, 40, out)
    return out


def pytest_terminal_summary(terminalreporter):
    from .test_acceptance import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
