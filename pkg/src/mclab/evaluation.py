"""Zero-shot and linear-probe evaluation, plus the results CSV.

Metrics:

* clean accuracy (CA): fraction of held-out images classified correctly.
* attack success rate (ASR): fraction of *non-target-class* images that are
  classified as the target class after the trigger is stamped on them.
  Target-class images are excluded so ASR measures the backdoor, not the
  model's ordinary competence on the target class.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import torch

from .data import CAPTION_TEMPLATES, Corpus, class_name
from .model import EncoderPair, encode_image, encode_text
from .triggers import TriggerPatch, apply_trigger

RESULTS_COLUMNS = ("run_id", "stage", "attack", "defense", "task",
                   "clean_accuracy", "attack_success_rate", "seed", "timestamp")


@dataclass(frozen=True)
class PromptSet:
    """Caption templates used to build zero-shot class embeddings."""

    templates: tuple[str, ...] = tuple(CAPTION_TEMPLATES)

    def __post_init__(self):
        if not self.templates:
            raise ValueError("prompt set needs at least one template")
        for t in self.templates:
            if "{name}" not in t:
                raise ValueError(f"template {t!r} has no {{name}} slot")

    def captions_for(self, label: int) -> list[str]:
        name = class_name(label)
        return [t.format(name=name) for t in self.templates]


@dataclass
class EvalReport:
    task: str
    clean_accuracy: float
    attack_success_rate: float | None
    n_clean: int
    n_attacked: int
    per_class_accuracy: dict[int, float] = field(default_factory=dict)


def _encode_images_batched(pair: EncoderPair, pixels: torch.Tensor,
                           batch: int = 256) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for start in range(0, pixels.shape[0], batch):
            outs.append(encode_image(pixels[start:start + batch], pair))
    return torch.cat(outs)


def class_prompt_embeddings(pair: EncoderPair, corpus: Corpus,
                            prompts: PromptSet, n_classes: int) -> torch.Tensor:
    """[K, D] matrix of normalized per-class mean prompt embeddings."""
    rows = []
    with torch.no_grad():
        for label in range(n_classes):
            tokens = torch.stack([
                corpus.vocab.encode(c, corpus.tokens.shape[1])
                for c in prompts.captions_for(label)
            ])
            emb = encode_text(tokens, pair).mean(dim=0)
            rows.append(emb / emb.norm().clamp(min=1e-12))
    return torch.stack(rows)


def _check_leakage(eval_ids: torch.Tensor, forbidden_ids) -> None:
    if forbidden_ids is None:
        return
    overlap = set(eval_ids.tolist()) & set(int(i) for i in forbidden_ids)
    if overlap:
        sample = sorted(overlap)[:5]
        raise ValueError(
            f"{len(overlap)} evaluation rows also appear in the training data "
            f"(e.g. ids {sample}); refusing to report contaminated metrics")


def eval_zero_shot(pair: EncoderPair, corpus: Corpus, *,
                   prompts: PromptSet | None = None,
                   trigger: TriggerPatch | None = None,
                   target_label: int | None = None,
                   forbidden_ids=None,
                   n_classes: int | None = None) -> EvalReport:
    """Zero-shot CA on `corpus`; ASR too when a trigger and target are given."""
    if trigger is not None and target_label is None:
        raise ValueError("target_label is required to score a trigger")
    _check_leakage(corpus.ids, forbidden_ids)
    k = n_classes if n_classes is not None else int(corpus.labels.max()) + 1
    prompts = prompts or PromptSet()
    class_emb = class_prompt_embeddings(pair, corpus, prompts, k)

    pixels = corpus.pixels
    labels = corpus.labels
    pred = (_encode_images_batched(pair, pixels) @ class_emb.T).argmax(dim=1)
    correct = pred == labels
    acc = float(correct.float().mean())
    per_class = {
        int(lbl): float(correct[labels == lbl].float().mean())
        for lbl in torch.unique(labels).tolist()
    }

    asr, n_attacked = None, 0
    if trigger is not None:
        keep = labels != target_label
        n_attacked = int(keep.sum())
        if n_attacked == 0:
            raise ValueError("no non-target images available to measure ASR")
        stamped = apply_trigger(pixels[keep], trigger)
        pred_t = (_encode_images_batched(pair, stamped) @ class_emb.T).argmax(dim=1)
        asr = float((pred_t == target_label).float().mean())

    return EvalReport(task="zero_shot", clean_accuracy=acc,
                      attack_success_rate=asr, n_clean=int(labels.shape[0]),
                      n_attacked=n_attacked, per_class_accuracy=per_class)


@dataclass(frozen=True)
class ProbeConfig:
    iters: int = 500
    lr: float = 0.1
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.iters < 1 or self.lr <= 0:
            raise ValueError("probe needs iters >= 1 and lr > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def _fit_probe(features: torch.Tensor, labels: torch.Tensor, n_classes: int,
               cfg: ProbeConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Full-batch GD multinomial logistic regression from zero init."""
    w = torch.zeros((n_classes, features.shape[1]), requires_grad=True)
    b = torch.zeros(n_classes, requires_grad=True)
    opt = torch.optim.SGD([w, b], lr=cfg.lr, weight_decay=cfg.weight_decay)
    for _ in range(cfg.iters):
        opt.zero_grad()
        loss = torch.nn.functional.cross_entropy(features @ w.T + b, labels)
        loss.backward()
        opt.step()
    return w.detach(), b.detach()


def eval_linear_probe(pair: EncoderPair, train_corpus: Corpus, test_corpus: Corpus, *,
                      trigger: TriggerPatch | None = None,
                      target_label: int | None = None,
                      forbidden_ids=None,
                      cfg: ProbeConfig | None = None,
                      n_classes: int | None = None) -> EvalReport:
    """Fit a linear classifier on frozen image embeddings, then score CA/ASR.

    Features are standardized with train-split statistics. The fit is
    deterministic: zero init, full-batch gradient descent.
    """
    if trigger is not None and target_label is None:
        raise ValueError("target_label is required to score a trigger")
    _check_leakage(test_corpus.ids, forbidden_ids)
    overlap = set(train_corpus.ids.tolist()) & set(test_corpus.ids.tolist())
    if overlap:
        raise ValueError(f"probe train and test splits share {len(overlap)} rows")
    cfg = cfg or ProbeConfig()
    k = n_classes if n_classes is not None else int(
        max(train_corpus.labels.max(), test_corpus.labels.max())) + 1

    feats_tr = _encode_images_batched(pair, train_corpus.pixels)
    mean = feats_tr.mean(dim=0)
    std = feats_tr.std(dim=0).clamp(min=1e-6)
    w, b = _fit_probe((feats_tr - mean) / std, train_corpus.labels, k, cfg)

    pixels_te = test_corpus.pixels
    labels_te = test_corpus.labels
    feats_te = (_encode_images_batched(pair, pixels_te) - mean) / std
    pred = (feats_te @ w.T + b).argmax(dim=1)
    correct = pred == labels_te
    acc = float(correct.float().mean())
    per_class = {
        int(lbl): float(correct[labels_te == lbl].float().mean())
        for lbl in torch.unique(labels_te).tolist()
    }

    asr, n_attacked = None, 0
    if trigger is not None:
        keep = labels_te != target_label
        n_attacked = int(keep.sum())
        if n_attacked == 0:
            raise ValueError("no non-target images available to measure ASR")
        stamped = apply_trigger(pixels_te[keep], trigger)
        feats_at = (_encode_images_batched(pair, stamped) - mean) / std
        pred_t = (feats_at @ w.T + b).argmax(dim=1)
        asr = float((pred_t == target_label).float().mean())

    return EvalReport(task="linear_probe", clean_accuracy=acc,
                      attack_success_rate=asr, n_clean=int(labels_te.shape[0]),
                      n_attacked=n_attacked, per_class_accuracy=per_class)


def append_result_row(path: str | Path, *, run_id: str, stage: str, attack: str,
                      defense: str, report: EvalReport, seed: int,
                      timestamp: str | None = None) -> None:
    """Append one evaluation to the results CSV, writing the header if new."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    ts = timestamp or datetime.now(timezone.utc).isoformat()
    asr = "" if report.attack_success_rate is None else f"{report.attack_success_rate:.6f}"
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(RESULTS_COLUMNS)
        writer.writerow([run_id, stage, attack, defense, report.task,
                         f"{report.clean_accuracy:.6f}", asr, seed, ts])


def read_results(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        missing = set(RESULTS_COLUMNS) - set(row)
        if missing:
            raise ValueError(f"results file missing columns: {sorted(missing)}")
    return rows
