"""Synthetic recipe/image corpus, JSON-lines corpus IO, TNSR tensors and checkpoints."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

log = logging.getLogger(__name__)

INGREDIENTS = (
    "tomato", "basil", "garlic", "onion", "cheese", "egg", "rice", "chicken", "beef", "pepper",
    "mushroom", "spinach", "carrot", "potato", "lemon", "butter", "flour", "sugar", "milk", "salmon",
)
QUANTITIES = ("one", "two", "three", "half")
UNITS = ("cup", "tablespoon", "teaspoon", "pound", "piece")
VERBS = ("chop", "slice", "dice", "mince", "grate", "rinse", "peel", "whisk")
DISHES = ("salad", "soup", "stew", "bake", "skillet", "casserole")
ADJECTIVES = ("simple", "easy", "hearty", "rich")
VESSELS = ("pan", "pot", "oven", "bowl")
MINUTES = ("ten", "fifteen", "twenty", "thirty")
FUNCTION_WORDS = ("and", "the", "preheat", "add", "everything", "to", "cook", "for", "minutes",
                  "season", "serve", "warm")


def grammar_words() -> list[str]:
    """Every word the synthetic grammar can emit, in a fixed order."""
    words: list[str] = []
    for group in (INGREDIENTS, QUANTITIES, UNITS, VERBS, DISHES, ADJECTIVES, VESSELS, MINUTES, FUNCTION_WORDS):
        for w in group:
            if w not in words:
                words.append(w)
    return words


def recipe_from_ingredients(subset: Iterable[int]) -> tuple[str, list[str], list[str]]:
    """Title, ingredient lines and instruction lines, fully determined by the subset."""
    s = sorted(set(subset))
    if len(s) < 2:
        raise ValueError("a recipe needs at least two ingredients")
    key = sum(s)
    names = [INGREDIENTS[i] for i in s]
    title = f"{ADJECTIVES[min(len(s) - 2, 3)]} {names[0]} and {names[1]} {DISHES[key % len(DISHES)]}"
    ingredients = [f"{QUANTITIES[i % 4]} {UNITS[(3 * i) % 5]} {INGREDIENTS[i]}" for i in s]
    vessel = VESSELS[key % len(VESSELS)]
    instructions = [f"preheat the {vessel}"]
    instructions += [f"{VERBS[i % 8]} the {INGREDIENTS[i]}" for i in s]
    instructions += [f"add everything to the {vessel}",
                     f"cook for {MINUTES[min(len(s) - 2, 3)]} minutes",
                     "season and serve warm"]
    return title, ingredients, instructions


def sample_subsets(rng: np.random.Generator, n: int, universe: int = len(INGREDIENTS)) -> list[list[int]]:
    out = []
    for _ in range(n):
        size = int(rng.integers(2, 6))
        out.append(sorted(int(i) for i in rng.choice(universe, size=size, replace=False)))
    return out


def recipe_text(title: str, ingredients: Iterable[str], instructions: Iterable[str]) -> str:
    return "\n".join([title, *ingredients, *instructions]).lower()


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class RecipeRecord:
    id: str
    title: str
    ingredients: tuple[str, ...]
    instructions: tuple[str, ...]
    image_path: str

    @property
    def text(self) -> str:
        return recipe_text(self.title, self.ingredients, self.instructions)

    def ingredient_set(self) -> frozenset[str]:
        return frozenset(line.split()[-1] for line in self.ingredients if line.split())

    def to_json(self, image_path: str | None = None) -> str:
        d = asdict(self)
        d["ingredients"] = list(self.ingredients)
        d["instructions"] = list(self.instructions)
        if image_path is not None:
            d["image_path"] = image_path
        return json.dumps(d, sort_keys=True, ensure_ascii=False)


class CorpusError(ValueError):
    pass


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- images

IMAGE_SHAPE = (16, 16, 3)
NOISE_SIGMA = 0.02
# ingredient appearance is a property of the world, not of any one corpus
WORLD_SEED = 1729


def ingredient_patterns(seed: int, shape=IMAGE_SHAPE, universe: int = len(INGREDIENTS)) -> tuple[np.ndarray, np.ndarray]:
    """Fixed base image and one additive colour blob per ingredient."""
    h, w, c = shape
    rng = np.random.default_rng([seed, 0x1A6E])
    yy, xx = np.mgrid[0:h, 0:w]
    base = 0.45 + 0.05 * rng.standard_normal((h, w, c))
    patterns = np.empty((universe, h, w, c))
    for i in range(universe):
        cy = rng.uniform(*((1, h - 2) if h >= 4 else (0, h - 1)))
        cx = rng.uniform(*((1, w - 2) if w >= 4 else (0, w - 1)))
        sigma = rng.uniform(1.5, 3.0)
        colour = rng.uniform(-0.45, 0.45, size=c)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        patterns[i] = blob[..., None] * colour
    return base, patterns


def render_image(subset: Iterable[int], base: np.ndarray, patterns: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    img = base + patterns[list(subset)].sum(axis=0) + NOISE_SIGMA * rng.standard_normal(base.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_samples(seed: int, n: int, shape=IMAGE_SHAPE, pattern_seed: int = WORLD_SEED) -> list[tuple[RecipeRecord, np.ndarray]]:
    """In-memory paired (record, image) samples. Image paths are relative."""
    if n < 1:
        raise ValueError("n must be >= 1")
    base, patterns = ingredient_patterns(pattern_seed, shape)
    rng = np.random.default_rng(seed)
    subsets = sample_subsets(rng, n)
    out = []
    for idx, s in enumerate(subsets):
        title, ingredients, instructions = recipe_from_ingredients(s)
        rid = f"r{idx:06d}"
        rec = RecipeRecord(rid, title, tuple(ingredients), tuple(instructions), f"images/{rid}.tnsr")
        out.append((rec, render_image(s, base, patterns, rng)))
    return out


def synth_corpus(seed: int, n: int, out_dir, shape=IMAGE_SHAPE) -> list[RecipeRecord]:
    """Write ``corpus.jsonl`` plus one TNSR image per record under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    lines = []
    for rec, img in make_samples(seed, n, shape):
        save_tensor(out / rec.image_path, img)
        lines.append(rec.to_json())
        records.append(RecipeRecord(rec.id, rec.title, rec.ingredients, rec.instructions, str(out / rec.image_path)))
    (out / "corpus.jsonl").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return records


_REQUIRED = ("id", "title", "ingredients", "instructions", "image_path")


def load_corpus(path) -> list[RecipeRecord]:
    """Parse and validate a JSON-lines corpus. Relative image paths resolve against the file's directory."""
    path = Path(path)
    root = path.parent
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise CorpusError(f"{path}:{lineno}: expected an object")
            missing = [k for k in _REQUIRED if k not in obj]
            if missing:
                raise CorpusError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            if not str(obj["title"]).strip() or not obj["instructions"]:
                raise CorpusError(f"{path}:{lineno}: empty title or instructions")
            img = Path(obj["image_path"])
            if not img.is_absolute():
                img = root / img
            if not img.is_file():
                raise CorpusError(f"{path}:{lineno}: image file not found: {img}")
            records.append(RecipeRecord(str(obj["id"]), str(obj["title"]), tuple(obj["ingredients"]),
                                        tuple(obj["instructions"]), str(img)))
    if not records:
        log.warning("corpus %s is empty", path)
    return records


def load_image(record: RecipeRecord, shape=None) -> np.ndarray:
    img = load_tensor(record.image_path)
    if img.ndim != 3 or (shape is not None and img.shape != tuple(shape)):
        raise CorpusError(f"{record.image_path}: expected image shape {shape}, got {img.shape}")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise CorpusError(f"{record.image_path}: pixel values outside [0, 1]")
    return img


def split_indices(n: int) -> tuple[list[int], list[int]]:
    """Deterministic 90/10 train/validation split by record index."""
    cut = max(1, int(round(0.9 * n))) if n > 1 else n
    return list(range(cut)), list(range(cut, n))


# ---------------------------------------------------------------- TNSR

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1


def encode_tensor(arr) -> bytes:
    a = np.asarray(arr, dtype="<f4")  # tobytes() is row-major; ascontiguousarray would lift 0-d to 1-d
    head = TNSR_MAGIC + struct.pack("<II", TNSR_VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one TNSR tensor starting at ``offset``; returns the array and the end offset."""
    def need(n, what):
        if offset + n > len(buf):
            raise FormatError(f"truncated TNSR data at offset {offset}: expected {what}")

    need(4, "magic")
    if buf[offset:offset + 4] != TNSR_MAGIC:
        raise FormatError(f"bad TNSR magic at offset {offset}")
    offset += 4
    need(8, "version and ndim")
    version, ndim = struct.unpack_from("<II", buf, offset)
    if version != TNSR_VERSION:
        raise FormatError(f"unsupported TNSR version {version} at offset {offset}")
    offset += 8
    need(4 * ndim, "dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    count = int(np.prod(dims, dtype=np.int64))
    need(4 * count, "payload")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(dims).astype(np.float32)
    return arr, offset + 4 * count


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"trailing bytes after TNSR payload at offset {end}")
    return arr


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"CHEF"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], config: Mapping) -> None:
    """Layout: magic, u32 version, u32 len + JSON config, u32 count, then (u32 len + name, TNSR) per tensor."""
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, encode_tensor(tensors[name])]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, expected_shapes=None) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint. ``expected_shapes(config)`` maps names to shapes to verify against."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic at offset 0")
    if len(buf) < 12:
        raise FormatError("truncated checkpoint header at offset 4")
    version, cfg_len = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at offset 4")
    off = 12
    if off + cfg_len + 4 > len(buf):
        raise FormatError(f"truncated checkpoint config at offset {off}")
    config = json.loads(buf[off:off + cfg_len].decode("utf-8"))
    off += cfg_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        if off + 4 > len(buf):
            raise FormatError(f"truncated tensor name at offset {off}")
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        tensors[name], off = decode_tensor(buf, off)
    if off != len(buf):
        raise FormatError(f"trailing bytes in checkpoint at offset {off}")
    if expected_shapes is not None:
        shapes = expected_shapes(config)
        for name, shape in shapes.items():
            if name not in tensors:
                raise CheckpointError(f"checkpoint is missing tensor {name}")
            if tensors[name].shape != tuple(shape):
                raise CheckpointError(f"shape mismatch for {name}: file has {tensors[name].shape}, config implies {tuple(shape)}")
    return tensors, config
