"""Frozen stand-ins for the pretrained language model, image encoder, text encoder and image decoder.

Everything here is a deterministic function of a seed and the config. The
language model is briefly pretrained on synthetic recipe text and the image
decoder is fitted by ridge regression onto the text encoder's outputs; after
construction all weights are read-only.
"""
from __future__ import annotations

import functools
import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import data as corpus
from .config import Config
from .layers import attention, attention_shapes, causal_mask, mlp, mlp_shapes, norm, norm_shapes
from .numerics import AdamState, DimensionError, Tensor, adam_step, backward, concat, cross_entropy, embedding, matmul, swap_last

PAD, BOS, EOS = "[PAD]", "[BOS]", "[EOS]"
SPECIALS = (PAD, BOS, EOS)
# maximum number of leading filler slots seen during LM pretraining
PREFIX_SLOTS = 8


class VocabError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "vocabulary error"


class Vocab:
    """Word-level vocabulary: specials, grammar words, then ``m`` image tokens at ids V..V+m-1."""

    def __init__(self, words, m: int):
        self.words = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        self.index = {w: i for i, w in enumerate(self.words)}
        self.m = m

    @classmethod
    def from_grammar(cls, m: int) -> "Vocab":
        return cls(corpus.grammar_words(), m)

    @property
    def V(self) -> int:
        return len(self.words)

    @property
    def size(self) -> int:
        return self.V + self.m

    pad = property(lambda self: self.index[PAD])
    bos = property(lambda self: self.index[BOS])
    eos = property(lambda self: self.index[EOS])

    def img(self, j: int) -> int:
        """Id of the j-th image token, 1-based."""
        if not 1 <= j <= self.m:
            raise VocabError(f"image token index {j} outside 1..{self.m}")
        return self.V + j - 1

    def is_img(self, token: int) -> bool:
        return self.V <= token < self.V + self.m

    def encode(self, text: str) -> list[int]:
        words = text.lower().split()
        unknown = [w for w in words if w not in self.index]
        if unknown:
            raise VocabError(f"unknown word(s): {', '.join(dict.fromkeys(unknown))}")
        return [self.index[w] for w in words]

    def decode(self, ids) -> list[str]:
        out = []
        for t in ids:
            t = int(t)
            if self.is_img(t):
                out.append(f"[IMG_{t - self.V + 1}]")
            elif 0 <= t < self.V:
                out.append(self.words[t])
            else:
                raise VocabError(f"token id {t} outside [0, {self.size})")
        return out

    def check_ids(self, ids) -> None:
        for t in ids:
            if not 0 <= int(t) < self.size:
                raise VocabError(f"token id {int(t)} outside [0, {self.size})")


def _freeze(weights: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for name, arr in weights.items():
        a = np.array(arr, copy=True)
        a.flags.writeable = False
        out[name] = a
    return out


# ---------------------------------------------------------------- language model

class FrozenLM:
    """Small decoder-only transformer with tied input/output embeddings."""

    def __init__(self, weights: dict[str, np.ndarray], n_layers: int, n_heads: int):
        self.weights = _freeze(weights)
        self.n_layers = n_layers
        self.n_heads = n_heads
        self._const = {k: Tensor(v) for k, v in self.weights.items()}

    @staticmethod
    def shapes(cfg: Config, V: int) -> dict[str, tuple]:
        e = cfg.e
        out = {"tok_emb": (V, e), "pos_emb": (cfg.lm_max_len, e), **norm_shapes("lnf", e)}
        for i in range(cfg.lm_layers):
            out.update(norm_shapes(f"h{i}/ln1", e))
            out.update(attention_shapes(f"h{i}/attn", e))
            out.update(norm_shapes(f"h{i}/ln2", e))
            out.update(mlp_shapes(f"h{i}/mlp", e, 4 * e))
        return out

    @classmethod
    def init(cls, cfg: Config, V: int, rng: np.random.Generator) -> "FrozenLM":
        shapes = cls.shapes(cfg, V)
        w = {}
        resid = 0.02 / math.sqrt(2 * cfg.lm_layers)
        for name in sorted(shapes):
            shape = shapes[name]
            if name.endswith("/g"):
                w[name] = np.ones(shape, np.float32)
            elif len(shape) == 1:
                w[name] = np.zeros(shape, np.float32)
            else:
                std = resid if name.endswith(("attn/o/w", "mlp/proj/w")) else 0.02
                w[name] = (std * rng.standard_normal(shape)).astype(np.float32)
        return cls(w, cfg.lm_layers, cfg.lm_heads)

    @property
    def V(self) -> int:
        return self.weights["tok_emb"].shape[0]

    @property
    def e(self) -> int:
        return self.weights["tok_emb"].shape[1]

    @property
    def max_len(self) -> int:
        return self.weights["pos_emb"].shape[0]

    def table(self, img_table: Tensor | None = None, w=None) -> Tensor:
        w = self._const if w is None else w
        if img_table is None:
            return w["tok_emb"]
        return concat([w["tok_emb"], img_table], axis=0)

    def embed(self, ids, img_table: Tensor | None = None, w=None) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        limit = self.V + (0 if img_table is None else img_table.shape[0])
        if ids.size and (ids.min() < 0 or ids.max() >= limit):
            bad = int(ids[(ids < 0) | (ids >= limit)].flat[0])
            raise VocabError(f"token id {bad} outside [0, {limit})")
        return embedding(self.table(img_table, w), ids)

    def forward(self, x: Tensor, w=None) -> Tensor:
        """Final-layer hidden states for input embeddings ``x`` of shape [B, T, e]."""
        w = self._const if w is None else w
        t = x.shape[1]
        if t > self.max_len:
            raise DimensionError(f"sequence length {t} exceeds the LM context of {self.max_len}")
        h = x + w["pos_emb"][:t]
        mask = causal_mask(t, x.dtype)
        for i in range(self.n_layers):
            h = h + self._attn(h, w, i, mask)
            h = h + mlp(norm(h, w, f"h{i}/ln2"), w, f"h{i}/mlp")
        return norm(h, w, "lnf")

    def _attn(self, h: Tensor, w, i: int, mask) -> Tensor:
        x = norm(h, w, f"h{i}/ln1")
        return attention(x, x, w, f"h{i}/attn", self.n_heads, mask)

    def logits(self, hidden: Tensor, img_table: Tensor | None = None, w=None) -> Tensor:
        return matmul(hidden, swap_last(self.table(img_table, w)))

    def astype(self, dtype) -> "FrozenLM":
        return FrozenLM({k: v.astype(dtype) for k, v in self.weights.items()}, self.n_layers, self.n_heads)


def lm_forward(lm: FrozenLM, tokens, prefix: Tensor | None = None, img_table: Tensor | None = None):
    """Single-sequence forward pass. Returns ``(logits [T, V+m], hidden [T, e])``.

    ``prefix`` ([k, e]) occupies the first k positions; the outputs cover all
    positions including the prefix.
    """
    ids = np.asarray(tokens, dtype=np.int64)[None, :]
    x = lm.embed(ids, img_table)
    if prefix is not None:
        x = concat([prefix.reshape(1, *prefix.shape), x], axis=1)
    hidden = lm.forward(x)
    logits = lm.logits(hidden, img_table)
    return logits[0], hidden[0]


# ---------------------------------------------------------------- image / text encoders, decoder

class FrozenVisualEncoder:
    def __init__(self, weight: np.ndarray, bias: np.ndarray, image_shape):
        self.weight, self.bias = _freeze({"w": weight, "b": bias}).values()
        self.image_shape = tuple(image_shape)

    @staticmethod
    def shapes(cfg: Config) -> dict[str, tuple]:
        n = cfg.H * cfg.W * cfg.C
        return {"w": (n, cfg.d), "b": (cfg.d,)}

    @classmethod
    def init(cls, cfg: Config, rng: np.random.Generator) -> "FrozenVisualEncoder":
        n = cfg.H * cfg.W * cfg.C
        w = rng.standard_normal((n, cfg.d)) * (2.0 / math.sqrt(n))
        w -= w.mean(axis=0, keepdims=True)  # uniform images map to tanh(bias)
        b = 0.1 * rng.standard_normal(cfg.d)
        return cls(w.astype(np.float32), b.astype(np.float32), cfg.image_shape)

    def __call__(self, image) -> np.ndarray:
        img = np.asarray(image)
        if img.shape[-3:] != self.image_shape:
            raise DimensionError(f"expected image shape {self.image_shape}, got {img.shape}")
        flat = img.reshape(*img.shape[:-3], -1).astype(self.weight.dtype)
        return np.tanh(flat @ self.weight + self.bias)


def sinusoidal(n: int, width: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / width)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class FrozenTextEncoder:
    """Token embedding + sinusoidal positions + one self-attention layer, cut/padded to L rows."""

    def __init__(self, weights: dict[str, np.ndarray], L: int):
        self.weights = _freeze(weights)
        self.L = L

    @staticmethod
    def shapes(cfg: Config, V: int) -> dict[str, tuple]:
        r = cfg.r
        return {"emb": (V, r), "wq": (r, r), "wk": (r, r), "wv": (r, r)}

    @classmethod
    def init(cls, cfg: Config, V: int, rng: np.random.Generator) -> "FrozenTextEncoder":
        r = cfg.r
        w = {"emb": rng.standard_normal((V, r)),
             "wq": rng.standard_normal((r, r)) * (0.5 / math.sqrt(r)),
             "wk": rng.standard_normal((r, r)) * (0.5 / math.sqrt(r)),
             "wv": rng.standard_normal((r, r)) / math.sqrt(r)}
        return cls({k: v.astype(np.float32) for k, v in w.items()}, cfg.L)

    @property
    def r(self) -> int:
        return self.weights["emb"].shape[1]

    def __call__(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.size == 0:
            raise ValueError("text encoder needs at least one token")
        w = self.weights
        dt = w["emb"].dtype
        x = w["emb"][ids] + sinusoidal(len(ids), self.r).astype(dt)
        scores = (x @ w["wq"]) @ (x @ w["wk"]).T / np.sqrt(dt.type(self.r))
        scores = scores - scores.max(axis=-1, keepdims=True)
        att = np.exp(scores)
        att /= att.sum(axis=-1, keepdims=True)
        x = x + att @ (x @ w["wv"])
        out = np.zeros((self.L, self.r), dtype=dt)
        n = min(self.L, len(ids))
        out[:n] = x[:n]
        return out


class FrozenImageDecoder:
    """Linear map from flattened [L, r] conditioning to pixels, then a sigmoid."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray, L: int, r: int, image_shape):
        self.weight, self.bias = _freeze({"w": weight, "b": bias}).values()
        self.L, self.r = L, r
        self.image_shape = tuple(image_shape)

    @staticmethod
    def shapes(cfg: Config) -> dict[str, tuple]:
        return {"w": (cfg.L * cfg.r, cfg.H * cfg.W * cfg.C), "b": (cfg.H * cfg.W * cfg.C,)}

    def __call__(self, cond) -> np.ndarray:
        c = np.asarray(cond)
        if c.shape[-2:] != (self.L, self.r):
            raise DimensionError(f"conditioning must be [{self.L}, {self.r}], got {c.shape}")
        flat = c.reshape(*c.shape[:-2], -1).astype(self.weight.dtype)
        z = flat @ self.weight + self.bias
        return (1.0 / (1.0 + np.exp(-z))).reshape(*c.shape[:-2], *self.image_shape)


# ---------------------------------------------------------------- bundle

@dataclass(frozen=True)
class Backbones:
    vocab: Vocab
    lm: FrozenLM
    visual: FrozenVisualEncoder
    text: FrozenTextEncoder
    decoder: FrozenImageDecoder
    config: Config

    def visual_encode(self, image) -> np.ndarray:
        return self.visual(image)

    def text_encode_target(self, tokens) -> np.ndarray:
        ids = [t for t in tokens if t != self.vocab.eos]
        return self.text(ids)

    def image_decode(self, cond) -> np.ndarray:
        return self.decoder(cond)

    @staticmethod
    def shapes(cfg: Config, V: int) -> dict[str, tuple]:
        out = {}
        out.update({f"frozen/lm/{k}": v for k, v in FrozenLM.shapes(cfg, V).items()})
        out.update({f"frozen/visual/{k}": v for k, v in FrozenVisualEncoder.shapes(cfg).items()})
        out.update({f"frozen/text/{k}": v for k, v in FrozenTextEncoder.shapes(cfg, V).items()})
        out.update({f"frozen/decoder/{k}": v for k, v in FrozenImageDecoder.shapes(cfg).items()})
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"frozen/lm/{k}": v for k, v in self.lm.weights.items()}
        out["frozen/visual/w"] = self.visual.weight
        out["frozen/visual/b"] = self.visual.bias
        out.update({f"frozen/text/{k}": v for k, v in self.text.weights.items()})
        out["frozen/decoder/w"] = self.decoder.weight
        out["frozen/decoder/b"] = self.decoder.bias
        return out

    @classmethod
    def from_state_dict(cls, tensors: dict[str, np.ndarray], cfg: Config) -> "Backbones":
        def sub(prefix):
            return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

        vocab = Vocab.from_grammar(cfg.m)
        lm = FrozenLM(sub("frozen/lm/"), cfg.lm_layers, cfg.lm_heads)
        visual = FrozenVisualEncoder(tensors["frozen/visual/w"], tensors["frozen/visual/b"], cfg.image_shape)
        text = FrozenTextEncoder(sub("frozen/text/"), cfg.L)
        decoder = FrozenImageDecoder(tensors["frozen/decoder/w"], tensors["frozen/decoder/b"], cfg.L, cfg.r,
                                     cfg.image_shape)
        return cls(vocab, lm, visual, text, decoder, cfg)

    def weights_hash(self) -> str:
        """SHA-256 over the serialized frozen tensors."""
        h = hashlib.sha256()
        for name, arr in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(corpus.encode_tensor(arr))
        return h.hexdigest()

    def astype(self, dtype) -> "Backbones":
        return Backbones(
            self.vocab, self.lm.astype(dtype),
            FrozenVisualEncoder(self.visual.weight.astype(dtype), self.visual.bias.astype(dtype), self.visual.image_shape),
            FrozenTextEncoder({k: v.astype(dtype) for k, v in self.text.weights.items()}, self.text.L),
            FrozenImageDecoder(self.decoder.weight.astype(dtype), self.decoder.bias.astype(dtype),
                               self.decoder.L, self.decoder.r, self.decoder.image_shape),
            self.config)


# ---------------------------------------------------------------- construction

def pretraining_batch(vocab: Vocab, texts_ids: list[list[int]], rng: np.random.Generator, batch: int):
    """Padded ``[PAD]*j [BOS] words`` inputs with next-token targets and a loss mask."""
    picks = rng.integers(0, len(texts_ids), size=batch)
    offsets = rng.integers(0, PREFIX_SLOTS + 1, size=batch)
    rows = [[vocab.pad] * int(o) + [vocab.bos] + texts_ids[i] + [vocab.eos] for i, o in zip(picks, offsets)]
    t = max(len(r) for r in rows) - 1
    inputs = np.full((batch, t), vocab.pad, dtype=np.int64)
    targets = np.full((batch, t), vocab.pad, dtype=np.int64)
    mask = np.zeros((batch, t), dtype=np.float32)
    for b, (row, o) in enumerate(zip(rows, offsets)):
        n = len(row) - 1
        inputs[b, :n] = row[:-1]
        targets[b, :n] = row[1:]
        mask[b, int(o):n] = 1.0
    return inputs, targets, mask


def pretrain_lm(lm: FrozenLM, vocab: Vocab, texts_ids, steps: int, lr: float, seed: int, batch: int = 16) -> FrozenLM:
    weights = {k: np.array(v) for k, v in lm.weights.items()}
    state = {k: AdamState.zeros_like(v, lr=lr, beta1=0.9, beta2=0.95) for k, v in weights.items()}
    rng = np.random.default_rng([seed, 0x9E7])
    for _ in range(steps):
        inputs, targets, mask = pretraining_batch(vocab, texts_ids, rng, batch)
        leaves = {k: Tensor(v, requires_grad=True) for k, v in weights.items()}
        hidden = lm.forward(lm.embed(inputs, w=leaves), w=leaves)
        nll = cross_entropy(lm.logits(hidden, w=leaves), targets, mask)
        loss = nll.sum() * (1.0 / float(mask.sum()))
        grads = backward(loss, leaves)
        for k in weights:
            weights[k], state[k] = adam_step(weights[k], grads[k], state[k])
    return FrozenLM(weights, lm.n_layers, lm.n_heads)


def fit_decoder(text: FrozenTextEncoder, vocab: Vocab, cfg: Config, seed: int, n: int = 2048,
                ridge: float = 1.0) -> FrozenImageDecoder:
    """Least-squares fit of logit(pixels) on text-encoder outputs over seeded synthetic pairs."""
    samples = corpus.make_samples(seed, n, cfg.image_shape)
    x = np.stack([text(vocab.encode(rec.text)).reshape(-1) for rec, _ in samples]).astype(np.float64)
    y = np.stack([img.reshape(-1) for _, img in samples]).astype(np.float64)
    y = np.clip(y, 0.01, 0.99)
    y = np.log(y / (1.0 - y))
    x_mean, y_mean = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - x_mean, y - y_mean
    w = np.linalg.solve(xc.T @ xc + ridge * np.eye(x.shape[1]), xc.T @ yc)
    b = y_mean - x_mean @ w
    return FrozenImageDecoder(w.astype(np.float32), b.astype(np.float32), cfg.L, cfg.r, cfg.image_shape)


def build_backbones(seed: int, cfg: Config) -> Backbones:
    """Deterministic frozen backbone set for ``(seed, cfg)``; results are cached per process."""
    return _build_cached(int(seed), backbone_config(cfg))


@functools.lru_cache(maxsize=8)
def _build_cached(seed: int, cfg: Config) -> Backbones:
    vocab = Vocab.from_grammar(cfg.m)
    rng = np.random.default_rng(seed)
    lm = FrozenLM.init(cfg, vocab.V, rng)
    visual = FrozenVisualEncoder.init(cfg, rng)
    text = FrozenTextEncoder.init(cfg, vocab.V, rng)
    if cfg.pretrain_steps:
        subsets = corpus.sample_subsets(np.random.default_rng([seed, 0x7E47]), 4096)
        texts = [vocab.encode(corpus.recipe_text(*corpus.recipe_from_ingredients(s))) for s in subsets]
        lm = pretrain_lm(lm, vocab, texts, cfg.pretrain_steps, cfg.pretrain_lr, seed)
    decoder = fit_decoder(text, vocab, cfg, seed=seed + 1_000_003)
    return Backbones(vocab, lm, visual, text, decoder, cfg)


def backbone_config(cfg: Config) -> Config:
    """``cfg`` with fields that do not affect the backbones reset to defaults."""
    defaults = Config()
    keep = ("e", "d", "m", "L", "r", "H", "W", "C", "lm_layers", "lm_heads", "lm_max_len", "pretrain_steps",
            "pretrain_lr")
    return Config(**{f: getattr(cfg if f in keep else defaults, f) for f in cfg.to_dict()})
