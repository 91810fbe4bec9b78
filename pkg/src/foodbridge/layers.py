"""Transformer building blocks over a flat ``name -> Tensor`` parameter mapping."""
from __future__ import annotations

import math

import numpy as np

from .numerics import Tensor, gelu, layer_norm, matmul, softmax, swap_last


def linear(x: Tensor, p, name: str) -> Tensor:
    return matmul(x, p[name + "/w"]) + p[name + "/b"]


def norm(x: Tensor, p, name: str) -> Tensor:
    return layer_norm(x, p[name + "/g"], p[name + "/b"])


def attention(xq: Tensor, xkv: Tensor, p, name: str, heads: int, mask: np.ndarray | None = None) -> Tensor:
    b, tq, width = xq.shape
    tk = xkv.shape[1]
    hd = width // heads
    q = linear(xq, p, name + "/q").reshape(b, tq, heads, hd).transpose(0, 2, 1, 3)
    k = linear(xkv, p, name + "/k").reshape(b, tk, heads, hd).transpose(0, 2, 1, 3)
    v = linear(xkv, p, name + "/v").reshape(b, tk, heads, hd).transpose(0, 2, 1, 3)
    scores = matmul(q, swap_last(k)) * (1.0 / math.sqrt(hd))
    if mask is not None:
        scores = scores + mask.astype(scores.dtype)
    out = matmul(softmax(scores), v).transpose(0, 2, 1, 3).reshape(b, tq, width)
    return linear(out, p, name + "/o")


def mlp(x: Tensor, p, name: str) -> Tensor:
    return linear(gelu(linear(x, p, name + "/fc")), p, name + "/proj")


def causal_mask(t: int, dtype=np.float32) -> np.ndarray:
    return np.triu(np.full((t, t), -1e9, dtype=dtype), k=1)


# ---------------------------------------------------------------- shapes / init

def linear_shapes(name: str, fan_in: int, fan_out: int) -> dict[str, tuple]:
    return {name + "/w": (fan_in, fan_out), name + "/b": (fan_out,)}


def norm_shapes(name: str, width: int) -> dict[str, tuple]:
    return {name + "/g": (width,), name + "/b": (width,)}


def attention_shapes(name: str, width: int) -> dict[str, tuple]:
    out = {}
    for part in ("q", "k", "v", "o"):
        out.update(linear_shapes(f"{name}/{part}", width, width))
    return out


def mlp_shapes(name: str, width: int, hidden: int) -> dict[str, tuple]:
    return {**linear_shapes(name + "/fc", width, hidden), **linear_shapes(name + "/proj", hidden, width)}


def init_uniform(shapes: dict[str, tuple], rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Weights ~ U(+-1/sqrt(fan_in)), biases and norm shifts 0, norm gains 1."""
    out = {}
    for name in sorted(shapes):
        shape = shapes[name]
        if name.endswith("/g"):
            out[name] = np.ones(shape, dtype=dtype)
        elif len(shape) == 1:
            out[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            out[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return out
