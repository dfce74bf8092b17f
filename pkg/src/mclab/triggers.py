"""Trigger construction and optimization.

Three trigger families are supported:

* ``optimized`` -- a small patch whose pixels are tuned against a frozen
  victim model so that stamped images embed close to the target class in
  both text and image space.
* ``fixed_pattern`` -- a static checkerboard patch (classic visible patch).
* ``blended`` -- a full-image noise pattern alpha-blended into the image.

The optimization objective has three parts, all computed on embeddings:

* a textual consistency term: InfoNCE pulling stamped-image embeddings
  toward an ensembled target-caption embedding against non-target captions,
* a visual positive term: mean cosine distance between stamped images and
  real target-class images (cyclic pairing),
* a visual negative term: negated mean cosine distance between stamped
  images and their clean versions (pushes stamped away from clean).

The visual terms enter through a hinge so they stop mattering once the
embedding has moved far enough:

    total = textual + w_hinge * max(0, pos + w_neg * neg + margin)
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .artifacts import TRIGGER_MAGIC, model_hash, read_container, write_container
from .data import Corpus
from .model import EncoderPair, encode_image, encode_text

TRIGGER_KINDS = ("optimized", "fixed_pattern", "blended")


@dataclass
class TriggerPatch:
    """A stampable trigger: patch pixels plus placement metadata."""

    pixels: torch.Tensor  # [3, h, w] float32 in [0, 1]
    position: tuple[int, int]  # (row, col) of top-left corner; ignored for blended
    kind: str = "optimized"
    blend_alpha: float | None = None  # only for kind == "blended"

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ValueError(f"trigger pixels must be [3, h, w], got {tuple(self.pixels.shape)}")
        if self.kind == "blended":
            if self.blend_alpha is None or not (0.0 < self.blend_alpha <= 1.0):
                raise ValueError("blended trigger requires blend_alpha in (0, 1]")

    def clone(self) -> "TriggerPatch":
        return TriggerPatch(self.pixels.detach().clone(), tuple(self.position),
                            self.kind, self.blend_alpha)


@dataclass(frozen=True)
class TriggerOptConfig:
    """Hyperparameters for patch optimization."""

    patch_size: int = 16
    position: tuple[int, int] | None = None  # None -> flush bottom-right
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    text_weight: float = 1.0     # weight on the textual consistency term
    hinge_weight: float = 500.0  # weight on the hinged visual term
    neg_weight: float = 1.0      # weight on the clean-distance term inside the hinge
    margin: float = 1.0          # hinge margin
    max_target_images: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (textual term needs negatives)")


def apply_trigger(pixels: torch.Tensor, trigger: TriggerPatch) -> torch.Tensor:
    """Stamp `trigger` onto a copy of `pixels` ([N,3,H,W] or [3,H,W])."""
    squeeze = pixels.ndim == 3
    if squeeze:
        pixels = pixels.unsqueeze(0)
    if pixels.ndim != 4 or pixels.shape[1] != 3:
        raise ValueError(f"expected [N, 3, H, W] pixels, got {tuple(pixels.shape)}")
    n, _, h, w = pixels.shape
    patch = trigger.pixels.to(pixels.dtype)
    if trigger.kind == "blended":
        if patch.shape[1:] != (h, w):
            raise ValueError(
                f"blended pattern is {tuple(patch.shape[1:])} but images are {(h, w)}")
        out = (1.0 - trigger.blend_alpha) * pixels + trigger.blend_alpha * patch
    else:
        r, c = trigger.position
        ph, pw = patch.shape[1], patch.shape[2]
        if r < 0 or c < 0 or r + ph > h or c + pw > w:
            raise ValueError(
                f"patch {ph}x{pw} at ({r}, {c}) does not fit in {h}x{w} image")
        out = pixels.clone()
        out[:, :, r:r + ph, c:c + pw] = patch
    return out.squeeze(0) if squeeze else out


def loss_textual(image_emb: torch.Tensor, target_text_emb: torch.Tensor,
                 negative_text_emb: torch.Tensor, temperature: float) -> torch.Tensor:
    """InfoNCE pulling each image embedding toward the target caption embedding.

    positive logit: <image, target> / T; negative logits: <image, negs> / T.
    Returns the mean over the batch of -log(exp(pos) / (exp(pos) + sum exp(neg))).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if negative_text_emb.ndim != 2 or negative_text_emb.shape[0] == 0:
        raise ValueError("need at least one negative caption embedding")
    pos = image_emb @ target_text_emb / temperature  # [N]
    neg = image_emb @ negative_text_emb.T / temperature  # [N, M]
    logits = torch.cat([pos.unsqueeze(1), neg], dim=1)
    return torch.nn.functional.cross_entropy(
        logits, torch.zeros(image_emb.shape[0], dtype=torch.long))


def loss_visual_pos(image_emb: torch.Tensor, target_image_emb: torch.Tensor) -> torch.Tensor:
    """Mean cosine distance to target-class image embeddings, cyclic pairing."""
    if target_image_emb.shape[0] == 0:
        raise ValueError("target image embedding set is empty")
    idx = torch.arange(image_emb.shape[0]) % target_image_emb.shape[0]
    cos = (image_emb * target_image_emb[idx]).sum(dim=1)
    return (1.0 - cos).mean()


def loss_visual_neg(image_emb: torch.Tensor, clean_image_emb: torch.Tensor) -> torch.Tensor:
    """Negated mean cosine distance to the clean versions of the same images."""
    if image_emb.shape != clean_image_emb.shape:
        raise ValueError("stamped and clean embedding batches must align")
    cos = (image_emb * clean_image_emb).sum(dim=1)
    return -(1.0 - cos).mean()


def loss_total(l_text: torch.Tensor, l_pos: torch.Tensor, l_neg: torch.Tensor,
               hinge_weight: float, neg_weight: float, margin: float,
               text_weight: float = 1.0) -> torch.Tensor:
    """Combine the three terms:

    text_weight * text + hinge_weight * max(0, pos + neg_weight * neg + margin)
    """
    hinge = torch.clamp(l_pos + neg_weight * l_neg + margin, min=0.0)
    return text_weight * l_text + hinge_weight * hinge


def make_fixed_patch(patch_size: int = 16, cell: int = 2) -> torch.Tensor:
    """Black/white checkerboard patch pixels, [3, patch_size, patch_size]."""
    rows = torch.arange(patch_size) // cell
    cols = torch.arange(patch_size) // cell
    board = ((rows[:, None] + cols[None, :]) % 2).to(torch.float32)
    return board.unsqueeze(0).repeat(3, 1, 1)


def make_blend_pattern(image_size: int = 64, seed: int = 0) -> torch.Tensor:
    """Full-image uniform noise pattern, [3, image_size, image_size]."""
    rng = np.random.default_rng([seed, 7])
    pattern = rng.uniform(0.0, 1.0, size=(3, image_size, image_size)).astype(np.float32)
    return torch.from_numpy(pattern)


def default_position(image_size: int, patch_size: int) -> tuple[int, int]:
    return (image_size - patch_size, image_size - patch_size)


def build_target_text_embedding(pair: EncoderPair, corpus: Corpus,
                                target_label: int) -> torch.Tensor:
    """Mean (re-normalized) embedding of the target class over caption templates."""
    from .data import CAPTION_TEMPLATES, class_name

    name = class_name(target_label)
    captions = [t.format(name=name) for t in CAPTION_TEMPLATES]
    tokens = torch.stack([
        corpus.vocab.encode(c, corpus.tokens.shape[1]) for c in captions
    ])
    with torch.no_grad():
        emb = encode_text(tokens, pair).mean(dim=0)
        emb = emb / emb.norm().clamp(min=1e-12)
    return emb


def optimize_trigger(pair: EncoderPair, corpus: Corpus, target_label: int,
                     cfg: TriggerOptConfig) -> tuple[TriggerPatch, list[dict]]:
    """Tune a patch against a frozen model; returns (trigger, per-epoch trace).

    The model is never updated: all non-patch tensors are embedded once under
    no_grad, and only the patch pixels carry gradients.
    """
    if target_label not in set(corpus.labels.tolist()):
        raise ValueError(f"target label {target_label} has no images in the corpus")
    image_size = corpus.pixels.shape[2]
    if cfg.patch_size > image_size:
        raise ValueError("patch does not fit in the image")
    position = cfg.position or default_position(image_size, cfg.patch_size)

    was_training = pair.visual.training
    pair.visual.eval()
    pair.textual.eval()
    frozen = [p.detach().clone() for p in pair.parameters()]

    target_mask = corpus.labels == target_label
    target_idx = target_mask.nonzero(as_tuple=True)[0]
    donor_idx = (~target_mask).nonzero(as_tuple=True)[0]
    n_donor = donor_idx.numel()
    if n_donor < cfg.batch_size:
        raise ValueError("not enough non-target images to fill a batch")

    pixels = corpus.pixels
    tokens = corpus.tokens
    with torch.no_grad():
        target_text = build_target_text_embedding(pair, corpus, target_label)
        keep = target_idx[:cfg.max_target_images]
        target_img_emb = encode_image(pixels[keep], pair)
        clean_emb = torch.empty((n_donor, target_img_emb.shape[1]))
        text_emb = torch.empty_like(clean_emb)
        for start in range(0, n_donor, 256):
            sl = donor_idx[start:start + 256]
            clean_emb[start:start + len(sl)] = encode_image(pixels[sl], pair)
            text_emb[start:start + len(sl)] = encode_text(tokens[sl], pair)

    gen = torch.Generator().manual_seed(cfg.seed)
    patch = torch.rand((3, cfg.patch_size, cfg.patch_size), generator=gen)
    patch.requires_grad_(True)
    opt = torch.optim.Adam([patch], lr=cfg.lr)

    trace: list[dict] = []
    for epoch in range(cfg.epochs):
        order = torch.randperm(n_donor, generator=gen)
        sums = {"loss_total": 0.0, "loss_textual": 0.0,
                "loss_visual_pos": 0.0, "loss_visual_neg": 0.0}
        n_batches = 0
        for start in range(0, n_donor - cfg.batch_size + 1, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            batch = pixels[donor_idx[rows]]
            trigger = TriggerPatch(patch, position, kind="optimized")
            stamped_emb = encode_image(apply_trigger(batch, trigger), pair)
            l_text = loss_textual(stamped_emb, target_text, text_emb[rows],
                                  pair.temperature)
            l_pos = loss_visual_pos(stamped_emb, target_img_emb)
            l_neg = loss_visual_neg(stamped_emb, clean_emb[rows])
            loss = loss_total(l_text, l_pos, l_neg, cfg.hinge_weight,
                              cfg.neg_weight, cfg.margin, cfg.text_weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                patch.clamp_(0.0, 1.0)
            sums["loss_total"] += float(loss.detach())
            sums["loss_textual"] += float(l_text.detach())
            sums["loss_visual_pos"] += float(l_pos.detach())
            sums["loss_visual_neg"] += float(l_neg.detach())
            n_batches += 1
        trace.append({"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}})

    if len(trace) >= 5 and trace[4]["loss_total"] >= trace[0]["loss_total"]:
        warnings.warn("trigger loss has not decreased over the first five epochs; "
                      "check the learning rate or hinge weights", RuntimeWarning)

    for before, p in zip(frozen, pair.parameters()):
        if not torch.equal(before, p.detach()):
            raise RuntimeError("model weights changed during trigger optimization")
    if was_training:
        pair.visual.train()
        pair.textual.train()

    final = TriggerPatch(patch.detach().clone(), position, kind="optimized")
    return final, trace


def save_trigger(trigger: TriggerPatch, path: str | Path, *,
                 victim_hash: str = "", opt_config: TriggerOptConfig | None = None,
                 target_label: int | None = None) -> str:
    """Write a trigger file; records which model it was optimized against."""
    header = {
        "format_version": 1,
        "kind": trigger.kind,
        "position": list(trigger.position),
        "blend_alpha": trigger.blend_alpha,
        "victim_model_hash": victim_hash,
        "target_label": target_label,
        "opt_config": asdict(opt_config) if opt_config else None,
    }
    blob = write_container(TRIGGER_MAGIC, header,
                           {"pixels": trigger.pixels.detach().numpy()})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_trigger(path: str | Path) -> tuple[TriggerPatch, dict]:
    header, arrays = read_container(Path(path).read_bytes(), TRIGGER_MAGIC)
    trigger = TriggerPatch(torch.from_numpy(arrays["pixels"]),
                           tuple(header["position"]), header["kind"],
                           header["blend_alpha"])
    return trigger, header


def trigger_hash(trigger: TriggerPatch) -> str:
    blob = write_container(TRIGGER_MAGIC, {
        "format_version": 1, "kind": trigger.kind,
        "position": list(trigger.position), "blend_alpha": trigger.blend_alpha,
        "victim_model_hash": "", "target_label": None, "opt_config": None,
    }, {"pixels": trigger.pixels.detach().numpy()})
    return hashlib.sha256(blob).hexdigest()
