"""Trainable bridge between the frozen backbones.

Three parameter groups are learned: ``W_recipe`` maps an image embedding to
``k`` LM input vectors, ``E_img`` holds the ``m`` image-token embeddings, and
the query transformer (``fw/*`` plus ``queries``) maps the LM hidden states at
the image tokens onto the image decoder's conditioning space.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .backbones import Backbones
from .config import Config
from .layers import attention, attention_shapes, init_uniform, linear, linear_shapes, mlp, mlp_shapes, norm, norm_shapes
from .numerics import (AdamState, DimensionError, NumericError, Tensor, adam_step, backward, concat, cross_entropy,
                       embedding, log_softmax, matmul, mse, swap_last)


class BridgeParams:
    """Named trainable arrays plus the config that fixes their shapes."""

    def __init__(self, arrays: Mapping[str, np.ndarray], config: Config):
        self.arrays = dict(arrays)
        self.config = config

    @staticmethod
    def shapes(cfg: Config) -> dict[str, tuple]:
        e, r = cfg.e, cfg.r
        out = {"W_recipe": (cfg.d, cfg.k * e), "E_img": (cfg.m, e), "queries": (cfg.L, r)}
        out.update(linear_shapes("fw/in", e, r))
        for i in range(cfg.fw_encoder_layers):
            out.update(norm_shapes(f"fw/enc{i}/ln1", r))
            out.update(attention_shapes(f"fw/enc{i}/attn", r))
            out.update(norm_shapes(f"fw/enc{i}/ln2", r))
            out.update(mlp_shapes(f"fw/enc{i}/mlp", r, 4 * r))
        out.update(norm_shapes("fw/enc_ln", r))
        for i in range(cfg.fw_decoder_layers):
            out.update(norm_shapes(f"fw/dec{i}/ln1", r))
            out.update(attention_shapes(f"fw/dec{i}/self", r))
            out.update(norm_shapes(f"fw/dec{i}/ln2", r))
            out.update(attention_shapes(f"fw/dec{i}/cross", r))
            out.update(norm_shapes(f"fw/dec{i}/ln3", r))
            out.update(mlp_shapes(f"fw/dec{i}/mlp", r, 4 * r))
        out.update(norm_shapes("fw/dec_ln", r))
        out.update(linear_shapes("fw/out", r, r))
        return out

    @classmethod
    def init(cls, cfg: Config, seed: int | None = None) -> "BridgeParams":
        rng = np.random.default_rng([cfg.seed if seed is None else seed, 0xB41D])
        shapes = cls.shapes(cfg)
        arrays = init_uniform(shapes, rng)
        bound = 1.0 / np.sqrt(cfg.e)
        arrays["E_img"] = rng.uniform(-bound, bound, size=shapes["E_img"]).astype(np.float32)
        arrays["queries"] = (0.02 * rng.standard_normal(shapes["queries"])).astype(np.float32)
        return cls(arrays, cfg)

    def leaves(self) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=True) for k, v in self.arrays.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.arrays.items()}

    def astype(self, dtype) -> "BridgeParams":
        return BridgeParams({k: v.astype(dtype) for k, v in self.arrays.items()}, self.config)

    def copy(self) -> "BridgeParams":
        return BridgeParams({k: v.copy() for k, v in self.arrays.items()}, self.config)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"bridge/{k}": v for k, v in self.arrays.items()}

    @classmethod
    def from_state_dict(cls, tensors: Mapping[str, np.ndarray], cfg: Config) -> "BridgeParams":
        return cls({k[len("bridge/"):]: np.array(v) for k, v in tensors.items() if k.startswith("bridge/")}, cfg)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]


class ParamTensors(dict):
    """``name -> Tensor`` mapping that also carries the query-transformer head count."""

    def __init__(self, tensors, heads: int = 4):
        super().__init__(tensors)
        self.heads = heads


def _tensors(params) -> ParamTensors:
    if isinstance(params, ParamTensors):
        return params
    if isinstance(params, BridgeParams):
        return ParamTensors(params.constants(), params.config.fw_heads)
    return ParamTensors(params)


# ---------------------------------------------------------------- visual prefix / recipe loss

def image_prefix(v, params, k: int | None = None) -> Tensor:
    """``v @ W_recipe`` reshaped to ``[k, e]`` (or ``[B, k, e]`` for a batch of embeddings)."""
    p = _tensors(params)
    w = p["W_recipe"]
    d, ke = w.shape
    e = p["E_img"].shape[1]
    k = ke // e if k is None else k
    if k * e != ke:
        raise DimensionError(f"W_recipe is [{d}, {ke}], which is not [d, k*e] for k={k}, e={e}")
    v = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=w.dtype))
    if v.shape[-1] != d:
        raise DimensionError(f"image embedding has dimension {v.shape[-1]}, expected d={d} (k={k}, e={e})")
    single = len(v.shape) == 1
    rows = v.reshape(1, d) if single else v
    out = matmul(rows, w)
    return out.reshape(k, e) if single else out.reshape(rows.shape[0], k, e)


def _pad(rows: Sequence[Sequence[int]], pad: int) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), pad, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def recipe_nll(visual: np.ndarray, seqs: Sequence[Sequence[int]], params, bb: Backbones) -> Tensor:
    """Per-example recipe NLL, shape [B]. ``seqs`` are the target tokens t_1..t_N."""
    if any(len(s) == 0 for s in seqs):
        raise ValueError("recipe token sequence is empty")
    p = _tensors(params)
    vocab = bb.vocab
    for s in seqs:
        vocab.check_ids(s)
    prefix = image_prefix(Tensor(np.asarray(visual, dtype=p["W_recipe"].dtype)), p)
    k = prefix.shape[1]
    inputs = _pad([[vocab.bos] + list(s[:-1]) for s in seqs], vocab.pad)
    targets = _pad(seqs, vocab.pad)
    mask = _pad([[1] * len(s) for s in seqs], 0)
    table = bb.lm.table(p["E_img"])
    x = concat([prefix, embedding(table, inputs)], axis=1)
    hidden = bb.lm.forward(x)
    logits = matmul(hidden[:, k:], swap_last(table))
    return cross_entropy(logits, targets, mask)


def recipe_loss(image, y: Sequence[int], params, bb: Backbones) -> Tensor:
    """Negative log-likelihood of recipe tokens ``y`` given the image's visual prefix."""
    v = bb.visual_encode(image)
    return recipe_nll(v[None, :], [list(y)], params, bb)[0]


# ---------------------------------------------------------------- image-token pathway

def _strip_eos(y: Sequence[int], bb: Backbones) -> list[int]:
    y = list(y)
    if y and y[-1] == bb.vocab.eos:
        y = y[:-1]
    for t in y:
        if bb.vocab.is_img(t):
            raise ValueError("training text must not contain [IMG] tokens")
    bb.vocab.check_ids(y)
    return y


def image_token_pass(seqs: Sequence[Sequence[int]], params, bb: Backbones) -> tuple[Tensor, Tensor]:
    """Run ``[BOS] t_1..t_N [IMG_1]..[IMG_m]``.

    Returns the per-example NLL of [IMG_1] after t_N (shape [B]) and the
    final-layer hidden states at the m image positions (shape [B, m, e]).
    """
    p = _tensors(params)
    vocab = bb.vocab
    m = p["E_img"].shape[0]
    words = [_strip_eos(s, bb) for s in seqs]
    img_ids = [vocab.V + j for j in range(m)]
    ids = _pad([[vocab.bos] + w + img_ids for w in words], vocab.pad)
    table = bb.lm.table(p["E_img"])
    hidden = bb.lm.forward(embedding(table, ids))
    b = len(words)
    last = np.array([len(w) for w in words])
    rows = np.arange(b)
    h_last = hidden[rows, last]
    logits = matmul(h_last, swap_last(table)).reshape(b, 1, table.shape[0])
    l_p = cross_entropy(logits, np.full((b, 1), vocab.img(1)))
    positions = last[:, None] + 1 + np.arange(m)[None, :]
    img_hidden = hidden[rows[:, None], positions]
    return l_p, img_hidden


def img_token_loss(y: Sequence[int], params, bb: Backbones) -> Tensor:
    """``-log p([IMG_1] | t_1..t_N)`` over the extended vocabulary."""
    l_p, _ = image_token_pass([y], params, bb)
    return l_p[0]


def qformer_forward(img_hidden, params) -> Tensor:
    """Map ``[m, e]`` (or ``[B, m, e]``) image-token states to ``[L, r]`` conditioning via learned queries."""
    p = _tensors(params)
    h = img_hidden if isinstance(img_hidden, Tensor) else Tensor(np.asarray(img_hidden, dtype=p["queries"].dtype))
    m, e = p["E_img"].shape
    single = len(h.shape) == 2
    if single:
        h = h.reshape(1, *h.shape)
    if h.shape[1:] != (m, e):
        raise DimensionError(f"query transformer expects [{m}, {e}] image-token states, got {h.shape[1:]}")
    n_enc = sum(1 for k in p if k.startswith("fw/enc") and k.endswith("/ln1/g"))
    n_dec = sum(1 for k in p if k.startswith("fw/dec") and k.endswith("/ln1/g"))
    heads = p.heads
    x = linear(h, p, "fw/in")
    for i in range(n_enc):
        a = norm(x, p, f"fw/enc{i}/ln1")
        x = x + attention(a, a, p, f"fw/enc{i}/attn", heads)
        x = x + mlp(norm(x, p, f"fw/enc{i}/ln2"), p, f"fw/enc{i}/mlp")
    memory = norm(x, p, "fw/enc_ln")
    b = h.shape[0]
    q = p["queries"]
    y = q + np.zeros((b, 1, 1), dtype=q.dtype)
    for i in range(n_dec):
        a = norm(y, p, f"fw/dec{i}/ln1")
        y = y + attention(a, a, p, f"fw/dec{i}/self", heads)
        y = y + attention(norm(y, p, f"fw/dec{i}/ln2"), memory, p, f"fw/dec{i}/cross", heads)
        y = y + mlp(norm(y, p, f"fw/dec{i}/ln3"), p, f"fw/dec{i}/mlp")
    out = linear(norm(y, p, "fw/dec_ln"), p, "fw/out")
    return out[0] if single else out


def generation_loss(y: Sequence[int], params, bb: Backbones, target: np.ndarray | None = None) -> Tensor:
    """Mean squared error between the query transformer's output and the text encoder's embedding of ``y``."""
    _, img_hidden = image_token_pass([y], params, bb)
    out = qformer_forward(img_hidden, params)
    tgt = bb.text_encode_target(_strip_eos(y, bb)) if target is None else target
    return mse(out, np.asarray(tgt)[None])[0]


# ---------------------------------------------------------------- training

@dataclass
class Example:
    visual: np.ndarray       # [d] frozen image embedding
    tokens: list[int]        # recipe words followed by [EOS]
    target: np.ndarray       # [L, r] text-encoder embedding of the words


def make_example(image, text: str, bb: Backbones) -> Example:
    words = bb.vocab.encode(text)
    return Example(bb.visual_encode(image), words + [bb.vocab.eos], bb.text(words))


def batch_losses(batch: Sequence[Example], params, bb: Backbones) -> tuple[Tensor, Tensor, Tensor]:
    """Per-example ``(l_r, l_p, l_g)``, each of shape [B]."""
    p = _tensors(params)
    dtype = p["W_recipe"].dtype
    visual = np.stack([ex.visual for ex in batch]).astype(dtype)
    l_r = recipe_nll(visual, [ex.tokens for ex in batch], p, bb)
    l_p, img_hidden = image_token_pass([ex.tokens for ex in batch], p, bb)
    out = qformer_forward(img_hidden, p)
    l_g = mse(out, np.stack([ex.target for ex in batch]).astype(dtype))
    return l_r, l_p, l_g


def init_optimizer(params: BridgeParams, cfg: Config | None = None) -> dict[str, AdamState]:
    cfg = params.config if cfg is None else cfg
    return {k: AdamState.zeros_like(v, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
            for k, v in params.arrays.items()}


def train_step(batch: Sequence[Example], params: BridgeParams, opt: dict[str, AdamState], bb: Backbones,
               step: int | None = None) -> tuple[BridgeParams, dict[str, AdamState], dict[str, float]]:
    """One Adam step on ``mean(l_r + l_p + l_g)`` over the batch."""
    if not batch:
        raise ValueError("batch is empty")
    leaves = ParamTensors(params.leaves(), params.config.fw_heads)
    try:
        with np.errstate(over="ignore", invalid="ignore"):  # reported below as NumericError instead
            l_r, l_p, l_g = batch_losses(batch, leaves, bb)
            per_example = l_r + l_p + l_g
            total = per_example.sum() * (1.0 / len(batch))
            grads = backward(total, leaves)
            new_arrays, new_opt = {}, {}
            for name, arr in params.arrays.items():
                new_arrays[name], new_opt[name] = adam_step(arr, grads[name], opt[name])
    except NumericError as exc:
        where = "" if step is None else f" at step {step}"
        raise NumericError(f"non-finite value{where}: {exc}") from exc
    report = {"l_r": float(l_r.data.mean()), "l_p": float(l_p.data.mean()),
              "l_g": float(l_g.data.mean()), "total": float(total.data)}
    return BridgeParams(new_arrays, params.config), new_opt, report


# ---------------------------------------------------------------- interleaved generation

@dataclass
class Generation:
    segments: list = field(default_factory=list)    # str or [H, W, C] image arrays
    tokens: list[int] = field(default_factory=list)  # every emitted id, forced [IMG] ids and [EOS] included

    @property
    def text(self) -> str:
        return " ".join(s for s in self.segments if isinstance(s, str))

    @property
    def images(self) -> list[np.ndarray]:
        return [s for s in self.segments if not isinstance(s, str)]


def _prompt_embeddings(prompt, p, bb: Backbones) -> np.ndarray:
    """Embeddings for a prompt: leading images, then [BOS], then the remaining segments in order."""
    table = bb.lm.table(p["E_img"]).data
    pieces, bos_done = [], False
    for seg in prompt:
        if isinstance(seg, str):
            ids = bb.vocab.encode(seg)
            if not bos_done:
                ids = [bb.vocab.bos] + ids
                bos_done = True
            pieces.append(table[ids])
        else:
            pieces.append(image_prefix(bb.visual_encode(seg), p).data)
    if not bos_done:
        pieces.append(table[[bb.vocab.bos]])
    return np.concatenate(pieces, axis=0)


def next_token_logits(ctx: np.ndarray, p, bb: Backbones) -> tuple[np.ndarray, Tensor]:
    hidden = bb.lm.forward(Tensor(ctx[None]))
    logits = bb.lm.logits(hidden[:, -1:], p["E_img"])
    return logits.data[0, 0], hidden


def generate_interleaved(prompt, params, bb: Backbones, max_tokens: int = 64, temperature: float | None = None,
                         seed: int = 0) -> Generation:
    """Autoregressive decoding that turns every emitted [IMG_1] into an image.

    After [IMG_1] the next ``m - 1`` tokens are forced to [IMG_2..IMG_m]; the
    hidden states at those m positions go through the query transformer and
    the frozen image decoder. [IMG_1] is only allowed while the whole run
    still fits in ``max_tokens``. Greedy unless ``temperature`` is given.
    """
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    if isinstance(prompt, (str, np.ndarray)):
        prompt = [prompt]
    p = _tensors(params)
    vocab = bb.vocab
    m = p["E_img"].shape[0]
    table = bb.lm.table(p["E_img"]).data
    ctx = _prompt_embeddings(prompt, p, bb)
    rng = np.random.default_rng(seed)
    out = Generation()
    words: list[str] = []
    banned = [vocab.pad, vocab.bos] + [vocab.img(j) for j in range(2, m + 1)]

    while len(out.tokens) < max_tokens:
        if ctx.shape[0] >= bb.lm.max_len:
            break
        logits, _ = next_token_logits(ctx, p, bb)
        logits = logits.astype(np.float64)
        logits[banned] = -np.inf
        if max_tokens - len(out.tokens) < m:
            logits[vocab.img(1)] = -np.inf
        if temperature is None or temperature <= 0:
            tok = int(np.argmax(logits))
        else:
            probs = np.exp(log_softmax(logits[np.isfinite(logits)] / temperature))
            allowed = np.flatnonzero(np.isfinite(logits))
            tok = int(allowed[rng.choice(len(allowed), p=probs)])
        if tok == vocab.eos:
            out.tokens.append(tok)
            break
        if tok == vocab.img(1):
            run = [vocab.img(j) for j in range(1, m + 1)]
            ctx = np.concatenate([ctx, table[run]], axis=0)
            if ctx.shape[0] > bb.lm.max_len:
                break
            hidden = bb.lm.forward(Tensor(ctx[None]))
            cond = qformer_forward(hidden[:, -m:], p)
            if words:
                out.segments.append(" ".join(words))
                words = []
            out.segments.append(bb.image_decode(cond.data[0]))
            out.tokens.extend(run)
            continue
        out.tokens.append(tok)
        words.append(vocab.words[tok])
        ctx = np.concatenate([ctx, table[[tok]]], axis=0)
    if words:
        out.segments.append(" ".join(words))
    return out


def forced_image(y: Sequence[int], params, bb: Backbones) -> np.ndarray:
    """Image synthesized for text ``y`` by appending the full [IMG] run (text-to-image path)."""
    p = _tensors(params)
    _, img_hidden = image_token_pass([y], p, bb)
    return bb.image_decode(qformer_forward(img_hidden, p).data[0])
