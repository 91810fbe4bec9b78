"""Image-to-recipe and recipe-to-image evaluation over the held-out split."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import data
from .backbones import Backbones
from .bridge import BridgeParams, forced_image, generate_interleaved
from .metrics import ScoreReport, clip_similarity, rouge2, sacrebleu


def held_out(records: Sequence[data.RecipeRecord]) -> list[data.RecipeRecord]:
    _, val = data.split_indices(len(records))
    return [records[i] for i in val]


def caption(record: data.RecipeRecord, params: BridgeParams, bb: Backbones) -> str:
    """Greedy recipe generated from the record's image alone."""
    image = data.load_image(record, bb.config.image_shape)
    return generate_interleaved([image], params, bb, max_tokens=bb.config.max_new_tokens).text


def eval_i2t(records: Sequence[data.RecipeRecord], params: BridgeParams, bb: Backbones,
             hypotheses: Sequence[str] | None = None) -> list[ScoreReport]:
    """BLEU and mean ROUGE-2 F1 of generated recipes; ``hypotheses`` bypasses generation."""
    if not records:
        raise ValueError("no records to evaluate")
    refs = [rec.text for rec in records]
    hyps = [caption(rec, params, bb) for rec in records] if hypotheses is None else list(hypotheses)
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses for {len(refs)} records")
    f1 = float(np.mean([rouge2(h, r).f1 for h, r in zip(hyps, refs)]))
    return [ScoreReport("sacrebleu", sacrebleu(hyps, refs), len(refs)),
            ScoreReport("rouge2_f1", f1, len(refs))]


def synthesize(record: data.RecipeRecord, params: BridgeParams, bb: Backbones) -> np.ndarray:
    return forced_image(bb.vocab.encode(record.text), params, bb)


def eval_t2i(records: Sequence[data.RecipeRecord], params: BridgeParams, bb: Backbones) -> list[ScoreReport]:
    """Mean similarity between images synthesized from each recipe and the real image."""
    if not records:
        raise ValueError("no records to evaluate")
    shape = bb.config.image_shape
    sims = [clip_similarity(synthesize(rec, params, bb), data.load_image(rec, shape), bb.visual_encode)
            for rec in records]
    return [ScoreReport("clip_similarity", float(np.mean(sims)), len(records))]
