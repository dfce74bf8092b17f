"""Miniature two-tower contrastive model: conv visual encoder, bag-of-words text encoder.

Both towers emit unit-normalized d-dim embeddings; training minimizes the
image-to-text contrastive loss (optionally symmetric) at fixed temperature.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import PAD_ID


class EncodingError(RuntimeError):
    """Non-finite activations or invalid tokens during encoding."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    in_channels: int = 3
    conv_channels: tuple[int, ...] = (32, 64, 128)
    gn_groups: int = 8
    embed_dim: int = 64
    vocab_size: int = 64
    max_caption_len: int = 12
    text_width: int = 64
    temperature: float = 0.07
    symmetric_loss: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not self.conv_channels:
            raise ValueError("need at least one conv block")
        for c in self.conv_channels:
            if c % self.gn_groups != 0:
                raise ValueError(
                    f"conv channels must be divisible by gn_groups={self.gn_groups}, got {c}")
        if self.embed_dim < 1 or self.vocab_size < 2 or self.max_caption_len < 1:
            raise ValueError("embed_dim, vocab_size, and max_caption_len must be positive")


class VisualEncoder(nn.Module):
    """Stack of stride-2 conv blocks, global average pool, linear head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        blocks = []
        c_in = cfg.in_channels
        for c_out in cfg.conv_channels:
            blocks.append(nn.Sequential(
                nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1),
                nn.GroupNorm(cfg.gn_groups, c_out),
                nn.ReLU(),
            ))
            c_in = c_out
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Linear(c_in, cfg.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for block in self.blocks:
            h = block(h)
        h = h.mean(dim=(2, 3))
        z = self.head(h)
        if not torch.isfinite(z).all():
            self._locate_bad_layer(x)
            raise EncodingError("visual head produced non-finite values")
        return F.normalize(z, dim=-1)

    def _locate_bad_layer(self, x: torch.Tensor):
        h = x
        with torch.no_grad():
            for i, block in enumerate(self.blocks):
                h = block(h)
                if not torch.isfinite(h).all():
                    raise EncodingError(f"visual block {i} produced non-finite values")


class TextEncoder(nn.Module):
    """Token embedding, masked mean pool, small MLP head.

    Padding rows are excluded from the pooled mean, so appended padding can
    never change the output.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embedding = nn.Embedding(cfg.vocab_size, cfg.text_width, padding_idx=PAD_ID)
        self.head = nn.Sequential(
            nn.Linear(cfg.text_width, cfg.text_width),
            nn.ReLU(),
            nn.Linear(cfg.text_width, cfg.embed_dim),
        )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        mask = (tokens != PAD_ID).unsqueeze(-1)
        emb = self.embedding(tokens) * mask
        pooled = emb.sum(dim=1) / mask.sum(dim=1).clamp(min=1)
        z = self.head(pooled)
        if not torch.isfinite(z).all():
            raise EncodingError("text head produced non-finite values")
        return F.normalize(z, dim=-1)


@dataclass
class EncoderPair:
    """Visual + textual encoders plus the fixed temperature."""

    visual: VisualEncoder
    textual: TextEncoder
    temperature: float
    config: ModelConfig

    def parameters(self):
        yield from self.visual.parameters()
        yield from self.textual.parameters()

    def clone(self) -> "EncoderPair":
        return EncoderPair(
            visual=copy.deepcopy(self.visual),
            textual=copy.deepcopy(self.textual),
            temperature=self.temperature,
            config=self.config,
        )

    def requires_grad_(self, flag: bool) -> "EncoderPair":
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def double(self) -> "EncoderPair":
        self.visual.double()
        self.textual.double()
        return self


def build_model(cfg: ModelConfig, seed: int) -> EncoderPair:
    """Construct an EncoderPair with seeded initialization."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        pair = EncoderPair(
            visual=VisualEncoder(cfg),
            textual=TextEncoder(cfg),
            temperature=cfg.temperature,
            config=cfg,
        )
    return pair


def encode_image(pixels: torch.Tensor, pair: EncoderPair) -> torch.Tensor:
    """Unit-normalized embeddings for a [B, C, H, W] pixel batch."""
    if pixels.dim() == 3:
        pixels = pixels.unsqueeze(0)
    return pair.visual(pixels)


def encode_text(tokens: torch.Tensor, pair: EncoderPair) -> torch.Tensor:
    """Unit-normalized embeddings for a [B, L] token batch; rejects bad token ids."""
    if tokens.dim() == 1:
        tokens = tokens.unsqueeze(0)
    vocab_size = pair.textual.embedding.num_embeddings
    bad = (tokens < 0) | (tokens >= vocab_size)
    if bad.any():
        b, pos = [int(v) for v in bad.nonzero()[0]]
        raise EncodingError(
            f"token id {int(tokens[b, pos])} out of vocabulary range at sample {b}, position {pos}"
        )
    return pair.textual(tokens)


def similarity(image_emb: torch.Tensor, text_emb: torch.Tensor) -> torch.Tensor:
    """Square matrix of dot products; entry (i, j) pairs image i with text j."""
    if image_emb.shape != text_emb.shape:
        raise ValueError(f"embedding shapes differ: {tuple(image_emb.shape)} vs {tuple(text_emb.shape)}")
    return image_emb @ text_emb.T


def info_nce_loss(sim: torch.Tensor, temperature: float, symmetric: bool = False) -> torch.Tensor:
    """Contrastive loss over a square similarity matrix, mean over the batch.

    Diagonal entries are the positives. The default form is image-to-text
    only; `symmetric` averages in the text-to-image direction as well.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if sim.dim() != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {tuple(sim.shape)}")
    logits = sim / temperature
    targets = torch.arange(sim.shape[0], device=sim.device)
    loss = F.cross_entropy(logits, targets)
    if symmetric:
        loss = 0.5 * (loss + F.cross_entropy(logits.T, targets))
    return loss


def batch_loss(pair: EncoderPair, pixels: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    img = encode_image(pixels, pair)
    txt = encode_text(tokens, pair)
    return info_nce_loss(similarity(img, txt), pair.temperature, pair.config.symmetric_loss)


def make_optimizer(pair: EncoderPair, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(pair.parameters(), lr=lr)


def train_step(
    pair: EncoderPair,
    pixels: torch.Tensor,
    tokens: torch.Tensor,
    optimizer: torch.optim.Optimizer,
) -> float:
    """One optimizer step on the contrastive loss; returns the pre-step loss."""
    if pixels.shape[0] < 2:
        raise ValueError("batch size must be >= 2 for meaningful negatives")
    optimizer.zero_grad(set_to_none=True)
    loss = batch_loss(pair, pixels, tokens)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            "non-finite contrastive loss",
            diagnostics={"loss": float(loss.detach()), "batch_size": int(pixels.shape[0])},
        )
    loss.backward()
    optimizer.step()
    return float(loss.detach())


@dataclass(frozen=True)
class TrainConfig:
    """Plain contrastive training loop hyperparameters."""

    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


def fit_contrastive(
    pair: EncoderPair,
    pixels: torch.Tensor,
    tokens: torch.Tensor,
    cfg: TrainConfig,
) -> list[dict]:
    """Train `pair` in place over shuffled minibatches; returns a per-epoch trace.

    If a step produces a non-finite loss, the weights are rolled back to the
    end of the previous epoch before TrainingDivergedError is re-raised.
    """
    if pixels.shape[0] != tokens.shape[0]:
        raise ValueError("pixels and tokens row counts differ")
    if pixels.shape[0] < cfg.batch_size:
        raise ValueError("dataset smaller than one batch")
    optimizer = make_optimizer(pair, cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    snapshot = (copy.deepcopy(pair.visual.state_dict()),
                copy.deepcopy(pair.textual.state_dict()))
    pair.visual.train()
    pair.textual.train()
    trace: list[dict] = []
    n = pixels.shape[0]
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        total, batches = 0.0, 0
        for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            try:
                total += train_step(pair, pixels[rows], tokens[rows], optimizer)
            except TrainingDivergedError as err:
                pair.visual.load_state_dict(snapshot[0])
                pair.textual.load_state_dict(snapshot[1])
                raise TrainingDivergedError(
                    f"training diverged at epoch {epoch}; weights rolled back "
                    f"to end of epoch {epoch - 1}",
                    diagnostics={**err.diagnostics, "epoch": epoch},
                ) from err
            batches += 1
        snapshot = (copy.deepcopy(pair.visual.state_dict()),
                    copy.deepcopy(pair.textual.state_dict()))
        trace.append({"epoch": epoch, "loss": total / batches})
    return trace
