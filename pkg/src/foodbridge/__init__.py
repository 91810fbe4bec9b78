"""Desk-scale bridge between a frozen language model and frozen image models for recipe/food-image generation."""
from .backbones import Backbones, Vocab, VocabError, build_backbones
from .bridge import (BridgeParams, Generation, batch_losses, forced_image, generate_interleaved, generation_loss,
                     image_prefix, img_token_loss, qformer_forward, recipe_loss, train_step)
from .config import Config, load_config
from .data import CheckpointError, CorpusError, FormatError, RecipeRecord, load_corpus, synth_corpus
from .estimator import RecipeImageBridge
from .metrics import ScoreReport, clip_similarity, rouge2, sacrebleu
from .numerics import DimensionError, MissingGradientError, NumericError, Tensor, adam_step, backward

__version__ = "0.1.0"

__all__ = [
    "Backbones", "BridgeParams", "CheckpointError", "Config", "CorpusError", "DimensionError", "FormatError",
    "Generation", "MissingGradientError", "NumericError", "RecipeImageBridge", "RecipeRecord", "ScoreReport",
    "Tensor", "Vocab", "VocabError", "adam_step", "backward", "batch_losses", "build_backbones", "clip_similarity",
    "forced_image", "generate_interleaved", "generation_loss", "image_prefix", "img_token_loss", "load_config",
    "load_corpus", "qformer_forward", "recipe_loss", "rouge2", "sacrebleu", "synth_corpus", "train_step",
]
