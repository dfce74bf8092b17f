"""Defenses: clean finetuning, SSL-regularized finetuning, trigger inversion,
and loss-based sample isolation.

Every defense works on a copy of the incoming model; the caller's model is
never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch
import torch.nn.functional as F

from .data import BOS_ID, PAD_ID, Corpus
from .model import (EncoderPair, TrainConfig, TrainingDivergedError, encode_image,
                    encode_text, fit_contrastive, info_nce_loss, make_optimizer,
                    similarity)


@dataclass(frozen=True)
class FinetuneConfig:
    """Clean-data finetuning; ssl_weight > 0 adds in-modality consistency terms."""

    epochs: int = 5
    batch_size: int = 128
    lr: float = 1e-4
    ssl_weight: float = 0.0
    token_dropout: float = 0.1
    crop_scale: tuple[float, float] = (0.6, 1.0)
    brightness: tuple[float, float] = (0.8, 1.2)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2 or self.lr <= 0:
            raise ValueError("need epochs >= 1, batch_size >= 2, lr > 0")
        if self.ssl_weight < 0:
            raise ValueError("ssl_weight must be >= 0")
        if not (0.0 <= self.token_dropout < 1.0):
            raise ValueError("token_dropout must be in [0, 1)")


def _augment_images(pixels: torch.Tensor, cfg: FinetuneConfig,
                    gen: torch.Generator) -> torch.Tensor:
    """Per-sample crop-resize, horizontal flip, brightness jitter."""
    n, _, h, w = pixels.shape
    lo, hi = cfg.crop_scale
    scales = lo + (hi - lo) * torch.rand(n, generator=gen)
    flips = torch.rand(n, generator=gen) < 0.5
    b_lo, b_hi = cfg.brightness
    brightness = b_lo + (b_hi - b_lo) * torch.rand(n, generator=gen)
    max_r = torch.rand(n, generator=gen)
    max_c = torch.rand(n, generator=gen)
    out = torch.empty_like(pixels)
    for i in range(n):
        ch = max(2, int(round(h * float(scales[i]))))
        cw = max(2, int(round(w * float(scales[i]))))
        r0 = int(float(max_r[i]) * (h - ch + 1))
        c0 = int(float(max_c[i]) * (w - cw + 1))
        crop = pixels[i:i + 1, :, r0:r0 + ch, c0:c0 + cw]
        view = F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False)
        if flips[i]:
            view = view.flip(-1)
        out[i] = (view[0] * brightness[i]).clamp(0.0, 1.0)
    return out


def _augment_tokens(tokens: torch.Tensor, p: float, gen: torch.Generator) -> torch.Tensor:
    """Drop (mask to PAD) content tokens with probability p; BOS/PAD untouched."""
    if p == 0.0:
        return tokens
    drop = (torch.rand(tokens.shape, generator=gen) < p) \
        & (tokens != PAD_ID) & (tokens != BOS_ID)
    return tokens.masked_fill(drop, PAD_ID)


def _contrastive_finetune(pair: EncoderPair, corpus: Corpus,
                          cfg: FinetuneConfig) -> tuple[EncoderPair, list[dict]]:
    """Shared finetuning core. With ssl_weight == 0 the augmentation RNG is
    never touched, so the zero-weight run is bit-identical to plain finetuning."""
    if len(corpus) < cfg.batch_size:
        raise ValueError("finetuning data smaller than one batch")
    tuned = pair.clone()
    tuned.visual.train()
    tuned.textual.train()
    optimizer = make_optimizer(tuned, cfg.lr)
    gen_shuffle = torch.Generator().manual_seed(cfg.seed)
    gen_aug = torch.Generator().manual_seed(cfg.seed + 0x5F5E1)
    n = len(corpus)
    trace: list[dict] = []
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=gen_shuffle)
        sums = {"loss": 0.0, "loss_clip": 0.0, "loss_ssl": 0.0}
        batches = 0
        for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            pixels, tokens = corpus.pixels[rows], corpus.tokens[rows]
            img = encode_image(pixels, tuned)
            txt = encode_text(tokens, tuned)
            l_clip = info_nce_loss(similarity(img, txt), tuned.temperature,
                                   tuned.config.symmetric_loss)
            loss = l_clip
            l_ssl = 0.0
            if cfg.ssl_weight > 0:
                aug_img = encode_image(_augment_images(pixels, cfg, gen_aug), tuned)
                aug_txt = encode_text(
                    _augment_tokens(tokens, cfg.token_dropout, gen_aug), tuned)
                ssl = 0.5 * (info_nce_loss(similarity(aug_img, img), tuned.temperature)
                             + info_nce_loss(similarity(aug_txt, txt), tuned.temperature))
                loss = l_clip + cfg.ssl_weight * ssl
                l_ssl = float(ssl.detach())
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    "non-finite finetuning loss",
                    diagnostics={"epoch": epoch, "batch_start": start})
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            sums["loss"] += float(loss.detach())
            sums["loss_clip"] += float(l_clip.detach())
            sums["loss_ssl"] += l_ssl
            batches += 1
        trace.append({"epoch": epoch, **{k: v / batches for k, v in sums.items()}})
    return tuned, trace


def defense_finetune(pair: EncoderPair, clean: Corpus,
                     cfg: FinetuneConfig | None = None) -> tuple[EncoderPair, list[dict]]:
    """Finetune on trusted clean pairs; returns (tuned copy, trace)."""
    cfg = cfg or FinetuneConfig()
    if cfg.ssl_weight != 0:
        cfg = replace(cfg, ssl_weight=0.0)
    return _contrastive_finetune(pair, clean, cfg)


def defense_cleanclip(pair: EncoderPair, clean: Corpus,
                      cfg: FinetuneConfig | None = None) -> tuple[EncoderPair, list[dict]]:
    """Finetune with added in-modality self-supervision on augmented views.

    The SSL terms give each image (caption) a second anchor that ignores the
    pairing, which decouples trigger pixels from the target caption.
    """
    cfg = cfg or FinetuneConfig(ssl_weight=1.0)
    if cfg.ssl_weight <= 0:
        raise ValueError("self-supervised finetuning needs ssl_weight > 0; "
                         "use defense_finetune for the plain variant")
    return _contrastive_finetune(pair, clean, cfg)


@dataclass(frozen=True)
class DecreeConfig:
    """Trigger-inversion detector settings."""

    steps: int = 400
    lr: float = 0.1
    batch_size: int = 32
    beta_init: float = 1.0
    beta_min: float = 1e-3
    beta_max: float = 100.0
    consistency_target: float = 0.9
    adjust_every: int = 10
    threshold: float = 0.1
    dispersion_window: int = 16
    noise_std: float = 0.05
    mask_cell: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 2:
            raise ValueError("need steps >= 1 and batch_size >= 2")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError("threshold must be in (0, 1)")
        if self.mask_cell < 1:
            raise ValueError("mask_cell must be >= 1")


@dataclass
class DetectionReport:
    inverted_mask: torch.Tensor     # [H, W] in [0, 1]
    inverted_pattern: torch.Tensor  # [3, H, W] in [0, 1]
    l1_norm: float                  # sum of mask values
    pl1_norm: float                 # l1_norm / (H * W)
    consistency: float              # mean pairwise cosine of stamped embeddings
    dispersion: float               # spatial spread: 1 - best-window mass fraction
    verdict: str                    # "backdoored" | "clean" | "inconclusive"
    threshold: float
    trace: list[dict] = field(default_factory=list)


def _upsample_mask(mask: torch.Tensor, cell: int) -> torch.Tensor:
    """Expand a [1, h/cell, w/cell] cell-grid mask to full [1, h, w] resolution."""
    if cell == 1:
        return mask
    return mask.repeat_interleave(cell, dim=-2).repeat_interleave(cell, dim=-1)


def _pairwise_consistency(emb: torch.Tensor) -> torch.Tensor:
    """Mean cosine over distinct pairs of unit embeddings."""
    n = emb.shape[0]
    total = emb.sum(dim=0)
    return (total @ total - n) / (n * (n - 1))


def _mask_dispersion(mask: torch.Tensor, window: int) -> float:
    """How spatially spread the mask is: 1 minus the fraction of total mass
    captured by the best window x window box. A compact patch scores near 0,
    a diffuse mask near 1; an all-zero mask degenerates to 0."""
    total = float(mask.sum())
    if total <= 0:
        return 0.0
    window = min(window, mask.shape[0], mask.shape[1])
    kernel = torch.ones((1, 1, window, window))
    sums = F.conv2d(mask.unsqueeze(0).unsqueeze(0), kernel)
    return 1.0 - float(sums.max()) / total


def detect_decree(pair: EncoderPair, clean: Corpus,
                  cfg: DecreeConfig | None = None) -> DetectionReport:
    """Invert the smallest mask+pattern that collapses embeddings together.

    A backdoored encoder admits a tiny stamp that maps everything near the
    trigger's embedding; a clean encoder has to repaint most of the image to
    get the same collapse. The reported statistic is the normalized L1 of the
    smallest mask seen whose batch consistency reached `consistency_target`;
    if no iterate ever collapses the embeddings, the model could not be
    stamped into agreement at all and is reported clean with a full mask.
    Verdict is "backdoored" iff that best L1 is strictly below `threshold`.
    """
    cfg = cfg or DecreeConfig()
    if len(clean) < cfg.batch_size:
        raise ValueError("not enough clean images for inversion batches")
    pair = pair.clone()
    pair.visual.eval()
    pair.textual.eval()
    for p in pair.parameters():
        p.requires_grad_(False)

    h, w = clean.pixels.shape[2], clean.pixels.shape[3]
    if h % cfg.mask_cell or w % cfg.mask_cell:
        raise ValueError(f"mask_cell={cfg.mask_cell} must divide the image size {h}x{w}")
    gen = torch.Generator().manual_seed(cfg.seed)
    # the mask lives on a coarse cell grid (upsampled before use): pixel-level
    # sparsity tricks are unrepresentable, so the search favors contiguous
    # regions the encoder genuinely responds to
    mh, mw = h // cfg.mask_cell, w // cfg.mask_cell
    w_mask = (torch.rand((1, mh, mw), generator=gen) - 0.5) * 0.2
    w_pattern = (torch.rand((3, h, w), generator=gen) - 0.5) * 0.2
    w_mask.requires_grad_(True)
    w_pattern.requires_grad_(True)
    opt = torch.optim.Adam([w_mask, w_pattern], lr=cfg.lr)

    beta = cfg.beta_init
    trace: list[dict] = []
    recent: list[float] = []
    diverged = False
    best: dict | None = None
    n = len(clean)
    order = torch.randperm(n, generator=gen)
    cursor = 0
    for step in range(cfg.steps):
        if cursor + cfg.batch_size > n:
            order = torch.randperm(n, generator=gen)
            cursor = 0
        rows = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        mask = _upsample_mask(0.5 * (torch.tanh(w_mask) + 1.0), cfg.mask_cell)
        pattern = 0.5 * (torch.tanh(w_pattern) + 1.0)
        stamped = (1.0 - mask) * clean.pixels[rows] + mask * pattern
        if cfg.noise_std > 0:
            # pixel noise rules out brittle adversarial stamps: only patterns the
            # encoder responds to robustly can hold the embeddings together
            noise = torch.randn(stamped.shape, generator=gen) * cfg.noise_std
            stamped = (stamped + noise).clamp(0.0, 1.0)
        emb = encode_image(stamped, pair)
        consistency = _pairwise_consistency(emb)
        pl1 = mask.sum() / (h * w)
        loss = -consistency + beta * pl1
        if not torch.isfinite(loss):
            diverged = True
            break
        cons_now, pl1_now = float(consistency.detach()), float(pl1.detach())
        if cons_now >= cfg.consistency_target and \
                (best is None or pl1_now < best["pl1"]):
            best = {"pl1": pl1_now, "consistency": cons_now,
                    "mask": mask.detach().squeeze(0).clone(),
                    "pattern": pattern.detach().clone(), "step": step}
        opt.zero_grad()
        loss.backward()
        opt.step()
        recent.append(cons_now)
        if (step + 1) % cfg.adjust_every == 0:
            mean_c = sum(recent) / len(recent)
            # raise the sparsity pressure only while the collapse constraint
            # holds; back off as soon as consistency is lost
            if mean_c > cfg.consistency_target:
                beta = min(beta * 2.0, cfg.beta_max)
            else:
                beta = max(beta / 2.0, cfg.beta_min)
            trace.append({"step": step + 1, "consistency": mean_c,
                          "beta": beta, "pl1": pl1_now})
            recent = []

    if diverged:
        mask = torch.full((h, w), float("nan"))
        return DetectionReport(
            inverted_mask=mask, inverted_pattern=mask.expand(3, h, w).clone(),
            l1_norm=float("nan"), pl1_norm=float("nan"),
            consistency=float("nan"), dispersion=float("nan"),
            verdict="inconclusive", threshold=cfg.threshold, trace=trace)

    if best is None:
        # never reached the collapse target: nothing short of repainting the
        # whole image holds this model's embeddings together
        mask = torch.ones((h, w))
        return DetectionReport(
            inverted_mask=mask, inverted_pattern=torch.full((3, h, w), 0.5),
            l1_norm=float(h * w), pl1_norm=1.0,
            consistency=max((t["consistency"] for t in trace), default=0.0),
            dispersion=_mask_dispersion(mask, cfg.dispersion_window),
            verdict="clean", threshold=cfg.threshold, trace=trace)

    verdict = "backdoored" if best["pl1"] < cfg.threshold else "clean"
    return DetectionReport(
        inverted_mask=best["mask"], inverted_pattern=best["pattern"],
        l1_norm=best["pl1"] * h * w, pl1_norm=best["pl1"],
        consistency=best["consistency"],
        dispersion=_mask_dispersion(best["mask"], cfg.dispersion_window),
        verdict=verdict, threshold=cfg.threshold, trace=trace)


@dataclass(frozen=True)
class AblConfig:
    """Loss-based isolation: warm up briefly, flag the fastest-learned pairs."""

    warmup_epochs: int = 2
    batch_size: int = 128
    lr: float = 1e-4
    flag_count: int = 24
    seed: int = 0

    def __post_init__(self):
        if self.warmup_epochs < 1 or self.flag_count < 1:
            raise ValueError("need warmup_epochs >= 1 and flag_count >= 1")


def per_sample_losses(pair: EncoderPair, corpus: Corpus,
                      batch_size: int = 128) -> dict[int, float]:
    """Image-to-text contrastive loss per sample, computed over id-ordered
    fixed batches so the numbers are reproducible."""
    order = torch.argsort(corpus.ids)
    losses: dict[int, float] = {}
    with torch.no_grad():
        for start in range(0, len(corpus), batch_size):
            rows = order[start:start + batch_size]
            if rows.numel() < 2:
                # a 1-sample batch has no negatives; fold it into a defined loss of 0
                for r in rows.tolist():
                    losses[int(corpus.ids[r])] = 0.0
                continue
            img = encode_image(corpus.pixels[rows], pair)
            txt = encode_text(corpus.tokens[rows], pair)
            logits = similarity(img, txt) / pair.temperature
            ce = F.cross_entropy(logits, torch.arange(rows.numel()), reduction="none")
            for r, val in zip(rows.tolist(), ce.tolist()):
                losses[int(corpus.ids[r])] = float(val)
    return losses


def abl_isolate(pair: EncoderPair, suspect: Corpus,
                cfg: AblConfig | None = None) -> tuple[list[int], dict[int, float]]:
    """Measure each pair's loss under the given warm-start model, train a copy
    briefly on the suspect data, and flag the `flag_count` pairs whose loss
    dropped the most.  Shortcut-style backdoors are learned fastest, so their
    pairs show the steepest drop.  The drop (not the absolute post-warmup
    loss) is the statistic: a poisoned pair keeps a high absolute loss from
    its mismatched caption even after its shortcut is learned."""
    cfg = cfg or AblConfig()
    before = per_sample_losses(pair, suspect, cfg.batch_size)
    probe = pair.clone()
    fit_contrastive(probe, suspect.pixels, suspect.tokens,
                    TrainConfig(epochs=cfg.warmup_epochs, batch_size=cfg.batch_size,
                                lr=cfg.lr, seed=cfg.seed))
    after = per_sample_losses(probe, suspect, cfg.batch_size)
    drops = {cid: before[cid] - after[cid] for cid in after}
    ranked = sorted(drops, key=lambda cid: (-drops[cid], cid))
    flagged = ranked[:min(cfg.flag_count, len(ranked))]
    return flagged, drops


def abl_remove_and_finetune(pair: EncoderPair, suspect: Corpus, flagged: list[int],
                            cfg: FinetuneConfig | None = None
                            ) -> tuple[EncoderPair, list[dict]]:
    """Drop the flagged rows and finetune a copy of the model on the rest."""
    cfg = cfg or FinetuneConfig()
    flagged_set = set(int(i) for i in flagged)
    keep = torch.tensor([int(i) not in flagged_set for i in corpus_ids(suspect)],
                        dtype=torch.bool)
    kept = suspect.select(keep)
    if len(kept) < cfg.batch_size:
        raise ValueError("isolation removed too much data to finetune on")
    return defense_finetune(pair, kept, cfg)


def corpus_ids(corpus: Corpus) -> list[int]:
    return [int(i) for i in corpus.ids]
