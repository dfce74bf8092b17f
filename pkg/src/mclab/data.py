"""Synthetic captioned-image corpus: rendering, tokenization, splits, disk format.

Images are procedurally rendered 64x64 scenes (one colored shape on a noisy
background); captions are filled from per-class templates. Pixel values are
quantized to the 8-bit grid at generation time so the PNG round trip is exact.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

PAD_ID = 0
BOS_ID = 1

CORPUS_FORMAT_VERSION = 1

COLOR_NAMES = ["red", "blue", "green", "yellow", "magenta", "cyan", "orange", "purple"]
SHAPE_NAMES = ["square", "circle", "triangle", "cross", "ring", "stripes", "diamond", "hexagon"]

COLOR_RGB = {
    "red": (0.85, 0.10, 0.10),
    "blue": (0.10, 0.20, 0.85),
    "green": (0.10, 0.75, 0.15),
    "yellow": (0.90, 0.85, 0.10),
    "magenta": (0.85, 0.10, 0.80),
    "cyan": (0.10, 0.80, 0.85),
    "orange": (0.90, 0.50, 0.10),
    "purple": (0.50, 0.10, 0.70),
}

CAPTION_TEMPLATES = [
    "a photo of a {name}",
    "an image of a {name}",
    "a {name} on a textured background",
    "this picture shows a {name}",
]

# Mentions the color attribute but not the shape word, emulating noisy web captions.
DISTRACTOR_TEMPLATE = "a bright photo of something {color}"


class TokenizationError(ValueError):
    """Raised for out-of-vocabulary words or over-long captions."""


class Vocabulary:
    """Word-level vocabulary with PAD=0 and BOS=1."""

    def __init__(self, words: list[str]):
        self.words = list(words)
        self.word_to_id = {w: i + 2 for i, w in enumerate(self.words)}
        self.size = len(self.words) + 2

    def encode(self, caption: str, max_len: int) -> torch.Tensor:
        ids = [BOS_ID]
        for pos, word in enumerate(caption.split()):
            if word not in self.word_to_id:
                raise TokenizationError(f"out-of-vocabulary word {word!r} at position {pos}")
            ids.append(self.word_to_id[word])
        if len(ids) > max_len:
            raise TokenizationError(f"caption exceeds max length {max_len}: {caption!r}")
        ids.extend([PAD_ID] * (max_len - len(ids)))
        return torch.tensor(ids, dtype=torch.long)

    def encode_batch(self, captions: list[str], max_len: int) -> torch.Tensor:
        return torch.stack([self.encode(c, max_len) for c in captions])


def default_vocabulary() -> Vocabulary:
    words: list[str] = []
    for tpl in CAPTION_TEMPLATES + [DISTRACTOR_TEMPLATE]:
        for w in tpl.replace("{name}", "").replace("{color}", "").split():
            if w not in words:
                words.append(w)
    words.extend(COLOR_NAMES)
    words.extend(SHAPE_NAMES)
    return Vocabulary(words)


def class_name(label: int) -> str:
    return f"{COLOR_NAMES[label]} {SHAPE_NAMES[label]}"


@dataclass(frozen=True)
class CorpusSpec:
    """Fully determines a corpus; (spec, seed) -> corpus is a pure function."""

    classes: int = 6
    per_class: int = 1350
    image_size: int = 64
    max_caption_len: int = 12
    caption_noise: float = 0.10
    templates: tuple[str, ...] = tuple(CAPTION_TEMPLATES)
    seed: int = 0

    def __post_init__(self):
        if self.classes < 4 or self.classes > len(SHAPE_NAMES):
            raise ValueError(f"classes must be in [4, {len(SHAPE_NAMES)}], got {self.classes}")
        if len(self.templates) < 2:
            raise ValueError("need at least 2 caption templates per class")
        if self.per_class < 1:
            raise ValueError("per_class must be positive")


@dataclass
class CaptionedImage:
    id: int
    pixels: torch.Tensor  # [3, H, W] float32 in [0, 1]
    caption: str
    tokens: torch.Tensor  # [L] long
    label: int


@dataclass
class Corpus:
    """Column-wise container for captioned images; the unit all stages consume."""

    ids: torch.Tensor      # [N] long
    labels: torch.Tensor   # [N] long
    pixels: torch.Tensor   # [N, 3, H, W] float32 in [0, 1]
    tokens: torch.Tensor   # [N, L] long
    captions: list[str]
    class_names: list[str]
    vocab: Vocabulary

    def __len__(self) -> int:
        return self.ids.shape[0]

    def __getitem__(self, i: int) -> CaptionedImage:
        return CaptionedImage(
            id=int(self.ids[i]),
            pixels=self.pixels[i],
            caption=self.captions[i],
            tokens=self.tokens[i],
            label=int(self.labels[i]),
        )

    @property
    def image_size(self) -> int:
        return self.pixels.shape[-1]

    def select(self, index) -> "Corpus":
        """New Corpus holding the rows at `index` (tensor, list, or bool mask)."""
        index = torch.as_tensor(index)
        if index.dtype == torch.bool:
            index = index.nonzero(as_tuple=True)[0]
        return Corpus(
            ids=self.ids[index],
            labels=self.labels[index],
            pixels=self.pixels[index],
            tokens=self.tokens[index],
            captions=[self.captions[int(i)] for i in index],
            class_names=self.class_names,
            vocab=self.vocab,
        )

    def where_label(self, label: int, invert: bool = False) -> "Corpus":
        mask = self.labels != label if invert else self.labels == label
        return self.select(mask)

    def rows_for_ids(self, ids) -> torch.Tensor:
        """Row indices of the given sample ids (order preserved)."""
        lookup = {int(v): i for i, v in enumerate(self.ids)}
        return torch.tensor([lookup[int(v)] for v in ids], dtype=torch.long)


@dataclass
class CorpusSplit:
    pretrain: Corpus
    attacker_pool: Corpus
    defender_clean: Corpus
    eval_clean: Corpus

    def parts(self) -> dict[str, Corpus]:
        return {
            "pretrain": self.pretrain,
            "attacker_pool": self.attacker_pool,
            "defender_clean": self.defender_clean,
            "eval_clean": self.eval_clean,
        }


def _shape_mask(shape: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float32)
    dy, dx = y - cy, x - cx
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "triangle":
        # upward triangle: width grows linearly from apex
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) * 0.577)
    if shape == "cross":
        bar = r / 3.0
        return ((np.abs(dx) <= bar) & (np.abs(dy) <= r)) | ((np.abs(dy) <= bar) & (np.abs(dx) <= r))
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "stripes":
        box = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        return box & (np.mod(dx + dy, 6.0) < 3.0)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "hexagon":
        q, s = np.abs(dx), np.abs(dy)
        return (q <= 0.866 * r) & (0.5 * q + 0.866 * s <= 0.866 * r)
    raise ValueError(f"unknown shape {shape!r}")


def _render_sample(rng: np.random.Generator, size: int, label: int) -> np.ndarray:
    base = rng.uniform(0.25, 0.75)
    tint = rng.uniform(-0.08, 0.08, size=3)
    img = np.full((size, size, 3), base, dtype=np.float32) + tint.astype(np.float32)
    img += rng.normal(0.0, 0.04, size=(size, size, 3)).astype(np.float32)

    r = rng.uniform(10.0, 20.0) * (size / 64.0)
    margin = r + 2.0
    cy = rng.uniform(margin, size - margin)
    cx = rng.uniform(margin, size - margin)
    mask = _shape_mask(SHAPE_NAMES[label], size, cy, cx, r)

    color = np.array(COLOR_RGB[COLOR_NAMES[label]], dtype=np.float32)
    color = color + rng.uniform(-0.08, 0.08, size=3).astype(np.float32)
    img[mask] = color

    img = np.clip(img, 0.0, 1.0)
    # quantize to the 8-bit grid so PNG save/load is bit-exact
    return np.round(img * 255.0).astype(np.float32) / 255.0


def _caption_for(rng: np.random.Generator, spec: CorpusSpec, label: int) -> str:
    if rng.uniform() < spec.caption_noise:
        return DISTRACTOR_TEMPLATE.format(color=COLOR_NAMES[label])
    tpl = spec.templates[rng.integers(len(spec.templates))]
    return tpl.format(name=class_name(label))


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Render the full corpus for `spec`; deterministic and per-sample independent."""
    vocab = default_vocabulary()
    n = spec.classes * spec.per_class
    names = [class_name(c) for c in range(spec.classes)]

    # validate templates against the vocabulary up front
    for tpl in list(spec.templates) + [DISTRACTOR_TEMPLATE]:
        probe = tpl.format(name=names[0], color=COLOR_NAMES[0])
        vocab.encode(probe, spec.max_caption_len)

    pixels = torch.empty(n, 3, spec.image_size, spec.image_size, dtype=torch.float32)
    labels = torch.empty(n, dtype=torch.long)
    captions: list[str] = []
    for i in range(n):
        label = i % spec.classes
        rng = np.random.default_rng([spec.seed, i])
        img = _render_sample(rng, spec.image_size, label)
        pixels[i] = torch.from_numpy(img).permute(2, 0, 1)
        labels[i] = label
        captions.append(_caption_for(rng, spec, label))

    tokens = vocab.encode_batch(captions, spec.max_caption_len)
    return Corpus(
        ids=torch.arange(n, dtype=torch.long),
        labels=labels,
        pixels=pixels,
        tokens=tokens,
        captions=captions,
        class_names=names,
        vocab=vocab,
    )


def _largest_remainder(weights: list[float], total: int) -> list[int]:
    raw = [w * total for w in weights]
    counts = [int(np.floor(x)) for x in raw]
    short = total - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def split_corpus(corpus: Corpus, fractions: tuple[float, float, float, float], seed: int) -> CorpusSplit:
    """Stratified disjoint split into pretrain / attacker pool / defender clean / eval."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(corpus)
    targets = _largest_remainder(list(fractions), n)
    if min(targets) == 0:
        raise ValueError(f"split sizes {targets} contain an empty split")

    gen = torch.Generator().manual_seed(seed)
    stacks = []
    for c in torch.unique(corpus.labels, sorted=True):
        idx = (corpus.labels == c).nonzero(as_tuple=True)[0]
        stacks.append(idx[torch.randperm(len(idx), generator=gen)].tolist())

    # round-robin draft across classes keeps each split's label mix near-global
    interleaved: list[int] = []
    cursor = 0
    while any(stacks):
        stack = stacks[cursor % len(stacks)]
        if stack:
            interleaved.append(stack.pop())
        cursor += 1

    parts = []
    start = 0
    for size in targets:
        rows = torch.tensor(interleaved[start:start + size], dtype=torch.long)
        parts.append(corpus.select(rows))
        start += size
    return CorpusSplit(*parts)


def save_corpus(corpus: Corpus, out_dir: str | Path) -> Path:
    """Write index.csv + meta.json + lossless PNGs; returns the directory."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    index_path = out / "index.csv"
    with open(index_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "caption", "image"])
        for i in range(len(corpus)):
            rel = f"images/{int(corpus.ids[i]):06d}.png"
            writer.writerow([int(corpus.ids[i]), int(corpus.labels[i]), corpus.captions[i], rel])
            arr = (corpus.pixels[i].permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
            Image.fromarray(arr).save(out / rel)
    meta = {
        "format_version": CORPUS_FORMAT_VERSION,
        "class_names": corpus.class_names,
        "vocab": corpus.vocab.words,
        "max_caption_len": int(corpus.tokens.shape[1]),
        "image_size": corpus.image_size,
        "index_sha256": hashlib.sha256(index_path.read_bytes()).hexdigest(),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out


def load_corpus(in_dir: str | Path) -> Corpus:
    """Load a corpus directory, validating the index hash."""
    src = Path(in_dir)
    meta = json.loads((src / "meta.json").read_text())
    if meta["format_version"] != CORPUS_FORMAT_VERSION:
        raise ValueError(f"unsupported corpus format version {meta['format_version']}")
    index_bytes = (src / "index.csv").read_bytes()
    digest = hashlib.sha256(index_bytes).hexdigest()
    if digest != meta["index_sha256"]:
        raise ValueError("corpus index hash mismatch; directory is corrupt or was edited")

    vocab = Vocabulary(meta["vocab"])
    ids, labels, captions, pixel_list = [], [], [], []
    with open(src / "index.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(int(row["id"]))
            labels.append(int(row["label"]))
            captions.append(row["caption"])
            arr = np.asarray(Image.open(src / row["image"]), dtype=np.float32) / 255.0
            pixel_list.append(torch.from_numpy(arr).permute(2, 0, 1))
    tokens = vocab.encode_batch(captions, meta["max_caption_len"])
    return Corpus(
        ids=torch.tensor(ids, dtype=torch.long),
        labels=torch.tensor(labels, dtype=torch.long),
        pixels=torch.stack(pixel_list),
        tokens=tokens,
        captions=captions,
        class_names=meta["class_names"],
        vocab=vocab,
    )
