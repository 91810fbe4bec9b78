from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, fields, replace

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class Config:
    # model dimensions
    e: int = 64
    d: int = 32
    k: int = 4
    m: int = 8
    L: int = 16
    r: int = 32
    H: int = 16
    W: int = 16
    C: int = 3
    # frozen language model
    lm_layers: int = 2
    lm_heads: int = 4
    lm_max_len: int = 128
    # query transformer
    fw_encoder_layers: int = 4
    fw_decoder_layers: int = 4
    fw_heads: int = 4
    # optimizer
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    # training
    steps: int = 2000
    batch_size: int = 16
    seed: int = 0
    # backbones
    backbone_seed: int = 0
    pretrain_steps: int = 2000
    pretrain_lr: float = 3e-3
    # decoding
    max_new_tokens: int = 64

    def __post_init__(self):
        for name in ("e", "d", "k", "m", "L", "r", "H", "W", "C", "lm_layers", "lm_heads", "lm_max_len",
                     "fw_encoder_layers", "fw_decoder_layers", "fw_heads", "batch_size", "max_new_tokens"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.steps < 0 or self.pretrain_steps < 0:
            raise ValueError("step counts must be >= 0")
        if self.e % self.lm_heads:
            raise ValueError(f"e={self.e} is not divisible by lm_heads={self.lm_heads}")
        if self.r % self.fw_heads:
            raise ValueError(f"r={self.r} is not divisible by fw_heads={self.fw_heads}")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.H, self.W, self.C)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"V", "step"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in known})

    def with_(self, **changes) -> "Config":
        return replace(self, **changes)


def load_config(path) -> Config:
    """Read a TOML file; tables are flattened, so ``[optimizer] lr = ...`` sets ``lr``."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    flat: dict = {}
    for key, value in raw.items():
        if isinstance(value, dict):
            flat.update(value)
        else:
            flat[key] = value
    return Config.from_dict(flat)


# gradient-check configuration
TINY = Config(e=8, d=4, k=2, m=2, L=2, r=4, H=4, W=4, C=3, pretrain_steps=0, steps=0, batch_size=2)
