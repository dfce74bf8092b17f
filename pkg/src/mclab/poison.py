"""Poisoned-pair construction and injection training.

The attacker picks which pool images to poison using three strategies in
equal measure, then pairs each stamped image with a target-class caption:

* ``boundary``  -- images whose runner-up zero-shot prediction is already the
  target class (closest to the decision boundary from the target side),
  strongest target score first.
* ``farthest``  -- images with the lowest target score (most out-of-the-way
  feature regions), lowest score first.
* ``random``    -- a seeded uniform shuffle of the remaining candidates.

Target-class images are never poisoned: pairing them with a target caption
would be a correct pair, not a backdoor signal. All rankings are total
orders (score, then id) so selection is reproducible bit-for-bit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch

from .data import CAPTION_TEMPLATES, Corpus, class_name
from .evaluation import PromptSet, class_prompt_embeddings
from .model import EncoderPair, TrainConfig, encode_image, fit_contrastive
from .triggers import TriggerPatch, apply_trigger, trigger_hash

STRATEGIES = ("boundary", "farthest", "random")


@dataclass
class CandidateRanking:
    """Per-strategy ranked candidate ids plus the target scores behind them."""

    boundary: list[int]
    farthest: list[int]
    random: list[int]
    target_scores: dict[int, float]

    def by_name(self, name: str) -> list[int]:
        if name not in STRATEGIES:
            raise ValueError(f"unknown strategy {name!r}")
        return getattr(self, name)


@dataclass(frozen=True)
class PoisonPlan:
    """What to poison: class to hijack, how many pairs, selection seed."""

    target_label: int
    poison_count: int
    seed: int = 0

    def __post_init__(self):
        if self.poison_count < 1:
            raise ValueError("poison_count must be >= 1")


def rank_candidates(pair: EncoderPair, pool: Corpus, target_label: int,
                    seed: int = 0) -> CandidateRanking:
    """Rank non-target pool images for poisoning under each strategy."""
    if target_label not in set(pool.labels.tolist()):
        raise ValueError(f"target label {target_label} absent from pool")
    n_classes = int(pool.labels.max()) + 1
    class_emb = class_prompt_embeddings(pair, pool, PromptSet(), n_classes)

    candidates = (pool.labels != target_label).nonzero(as_tuple=True)[0]
    if candidates.numel() == 0:
        raise ValueError("pool has no non-target images to poison")
    with torch.no_grad():
        scores = torch.empty((candidates.numel(), n_classes))
        for start in range(0, candidates.numel(), 256):
            sl = candidates[start:start + 256]
            scores[start:start + len(sl)] = encode_image(pool.pixels[sl], pair) @ class_emb.T

    cand_ids = pool.ids[candidates].tolist()
    target_score = scores[:, target_label]
    top2 = scores.topk(2, dim=1).indices  # [M, 2]
    runner_up_is_target = top2[:, 1] == target_label

    boundary = [cand_ids[i] for i in sorted(
        (i for i in range(len(cand_ids)) if runner_up_is_target[i]),
        key=lambda i: (-float(target_score[i]), cand_ids[i]))]
    farthest = [cand_ids[i] for i in sorted(
        range(len(cand_ids)),
        key=lambda i: (float(target_score[i]), cand_ids[i]))]
    rng = np.random.default_rng([seed, 101])
    random_order = [cand_ids[i] for i in rng.permutation(len(cand_ids))]

    return CandidateRanking(
        boundary=boundary, farthest=farthest, random=random_order,
        target_scores={cid: float(target_score[i]) for i, cid in enumerate(cand_ids)})


def select_poison_ids(ranking: CandidateRanking, count: int,
                      mode: str = "stratified") -> dict[int, str]:
    """Pick `count` ids: one third per strategy, remainder to random.

    Earlier strategies have priority on contested ids; any shortfall (e.g. too
    few boundary-qualified images) is backfilled from the random ranking,
    which always covers every candidate. Returns {id: strategy}.
    mode="random" skips the stratification and takes the random ranking only.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if mode not in ("stratified", "random"):
        raise ValueError(f"unknown selection mode {mode!r}")
    universe = set(ranking.random)
    if count > len(universe):
        raise ValueError(
            f"cannot poison {count} images from a pool of {len(universe)} candidates")
    base = count // 3
    quotas = {"boundary": base, "farthest": base, "random": count - 2 * base}
    if mode == "random":
        quotas = {"boundary": 0, "farthest": 0, "random": count}
    chosen: dict[int, str] = {}
    for name in STRATEGIES:
        taken = 0
        for cid in ranking.by_name(name):
            if taken == quotas[name]:
                break
            if cid not in chosen:
                chosen[cid] = name
                taken += 1
    for cid in ranking.random:  # backfill shortfalls
        if len(chosen) == count:
            break
        if cid not in chosen:
            chosen[cid] = "random"
    return chosen


def build_poisoned_dataset(pool: Corpus, trigger: TriggerPatch,
                           target_label: int, selection: dict[int, str],
                           seed: int = 0) -> tuple[Corpus, dict]:
    """Stamp the trigger and swap in target captions for the selected rows.

    Returns a new Corpus (the input is untouched) and a manifest describing
    exactly which rows were altered and how. Stamped pixels are snapped to the
    8-bit grid so the dataset survives a PNG round trip unchanged.
    """
    missing = [cid for cid in selection if cid not in set(pool.ids.tolist())]
    if missing:
        raise ValueError(f"selected ids not in pool: {sorted(missing)[:5]}")
    on_target = [cid for cid in selection
                 if int(pool.labels[pool.rows_for_ids([cid])[0]]) == target_label]
    if on_target:
        raise ValueError(
            f"refusing to poison target-class images: {sorted(on_target)[:5]}")

    pixels = pool.pixels.clone()
    tokens = pool.tokens.clone()
    captions = list(pool.captions)
    name = class_name(target_label)
    max_len = pool.tokens.shape[1]
    rows_entries = []
    for cid in sorted(selection):
        row = int(pool.rows_for_ids([cid])[0])
        stamped = apply_trigger(pool.pixels[row], trigger)
        pixels[row] = torch.round(stamped * 255.0) / 255.0
        rng = np.random.default_rng([seed, cid])
        template = CAPTION_TEMPLATES[int(rng.integers(len(CAPTION_TEMPLATES)))]
        caption = template.format(name=name)
        captions[row] = caption
        tokens[row] = pool.vocab.encode(caption, max_len)
        rows_entries.append({"id": cid, "strategy": selection[cid], "caption": caption})

    poisoned = Corpus(ids=pool.ids.clone(), labels=pool.labels.clone(),
                      pixels=pixels, tokens=tokens, captions=captions,
                      class_names=pool.class_names, vocab=pool.vocab)
    manifest = {
        "format_version": 1,
        "target_label": target_label,
        "target_class": name,
        "seed": seed,
        "poison_count": len(selection),
        "trigger": {"kind": trigger.kind, "position": list(trigger.position),
                    "blend_alpha": trigger.blend_alpha,
                    "sha256": trigger_hash(trigger)},
        "rows": rows_entries,
    }
    return poisoned, manifest


def manifest_hash(manifest: dict) -> str:
    import json
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def poison_train(pair: EncoderPair, poisoned: Corpus, cfg: TrainConfig) -> list[dict]:
    """Contrastive training on the poisoned pool; trains `pair` in place."""
    return fit_contrastive(pair, poisoned.pixels, poisoned.tokens, cfg)
