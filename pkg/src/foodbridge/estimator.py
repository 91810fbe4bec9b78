"""scikit-learn style wrapper: ``fit(images, recipes)`` then ``predict(images)``."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .backbones import build_backbones
from .bridge import forced_image, generate_interleaved, image_prefix, make_example
from .config import Config
from .metrics import sacrebleu
from .training import TrainState, train


def check_images(X, shape: tuple[int, int, int] | None = None) -> np.ndarray:
    """Validate a stack of images ``[n, H, W, C]`` with values in [0, 1]."""
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim != 4:
        raise ValueError(f"expected images of shape [n, H, W, C], got {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError("need at least one image")
    if shape is not None and arr.shape[1:] != tuple(shape):
        raise ValueError(f"images have shape {arr.shape[1:]}, estimator was fit on {tuple(shape)}")
    if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("pixel values must be finite and within [0, 1]")
    return arr


def check_texts(y, n: int | None = None) -> list[str]:
    if isinstance(y, str):
        raise ValueError("expected a sequence of recipe strings, got a single string")
    texts = [str(t) for t in y]
    if n is not None and len(texts) != n:
        raise ValueError(f"{len(texts)} recipes for {n} images")
    return texts


class RecipeImageBridge(BaseEstimator):
    """Trains the bridge on paired images and recipe texts.

    Frozen backbones are built from ``backbone_seed``; only the bridge is fit.
    Extra config fields can be passed through ``config_overrides``.
    """

    def __init__(self, steps: int = 2000, batch_size: int = 16, lr: float = 1e-3, seed: int = 0,
                 backbone_seed: int = 0, pretrain_steps: int = 2000, config_overrides: dict | None = None):
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.backbone_seed = backbone_seed
        self.pretrain_steps = pretrain_steps
        self.config_overrides = config_overrides

    def _config(self, image_shape) -> Config:
        h, w, c = image_shape
        return Config(**{"steps": self.steps, "batch_size": self.batch_size, "lr": self.lr, "seed": self.seed,
                         "backbone_seed": self.backbone_seed, "pretrain_steps": self.pretrain_steps,
                         "H": h, "W": w, "C": c, **(self.config_overrides or {})})

    def fit(self, X, y, log=None):
        images = check_images(X)
        texts = check_texts(y, len(images))
        cfg = self._config(images.shape[1:])
        bb = build_backbones(cfg.backbone_seed, cfg)
        examples = [make_example(img, text, bb) for img, text in zip(images, texts)]
        self.config_ = cfg
        self.backbones_ = bb
        self.state_ = train(examples, bb, TrainState.fresh(cfg), log=log)
        return self

    def _fitted(self, X) -> np.ndarray:
        check_is_fitted(self, "state_")
        return check_images(X, self.config_.image_shape)

    def predict(self, X) -> list[str]:
        """Greedy recipe text for each image."""
        images = self._fitted(X)
        params, bb = self.state_.params, self.backbones_
        return [generate_interleaved([img], params, bb, max_tokens=self.config_.max_new_tokens).text
                for img in images]

    def transform(self, X) -> np.ndarray:
        """The ``k * e`` prefix vectors each image contributes to the language model, flattened."""
        images = self._fitted(X)
        params, bb = self.state_.params, self.backbones_
        return np.stack([image_prefix(bb.visual_encode(img), params).data.reshape(-1) for img in images])

    def generate_images(self, texts: Sequence[str]) -> np.ndarray:
        check_is_fitted(self, "state_")
        bb = self.backbones_
        return np.stack([forced_image(bb.vocab.encode(t), self.state_.params, bb) for t in check_texts(texts)])

    def score(self, X, y) -> float:
        """Corpus BLEU of :meth:`predict` against ``y``."""
        return sacrebleu(self.predict(X), check_texts(y, len(X)))
