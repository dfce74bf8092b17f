"""Evaluation metrics checked against hand-computable stub encoders."""

import csv

import pytest
import torch
import torch.nn as nn

from mclab.data import Corpus, class_name, default_vocabulary
from mclab.evaluation import (EvalReport, ProbeConfig, PromptSet,
                              append_result_row, eval_linear_probe,
                              eval_zero_shot, read_results, RESULTS_COLUMNS)
from mclab.model import EncoderPair, ModelConfig
from mclab.triggers import TriggerPatch

VOCAB = default_vocabulary()
RED = VOCAB.word_to_id["red"]
BLUE = VOCAB.word_to_id["blue"]


class StubVisual(nn.Module):
    """Embedding = normalized (pixel[0,0,0], pixel[1,0,0]); fully predictable."""

    def forward(self, x):
        raw = torch.stack([x[:, 0, 0, 0], x[:, 1, 0, 0]], dim=1)
        return torch.nn.functional.normalize(raw + 1e-9, dim=-1)


class StubText(nn.Module):
    """Maps captions containing 'red' to e0 and 'blue' to e1."""

    def __init__(self):
        super().__init__()
        # only consulted for vocabulary-range validation
        self.embedding = nn.Embedding(VOCAB.size, 2)

    def forward(self, tokens):
        has_red = (tokens == RED).any(dim=1).float()
        has_blue = (tokens == BLUE).any(dim=1).float()
        raw = torch.stack([has_red, has_blue], dim=1)
        return torch.nn.functional.normalize(raw + 1e-9, dim=-1)


def stub_pair() -> EncoderPair:
    cfg = ModelConfig(image_size=4, conv_channels=(8,), gn_groups=4, embed_dim=2,
                      vocab_size=VOCAB.size, max_caption_len=12, text_width=8)
    return EncoderPair(visual=StubVisual(), textual=StubText(),
                       temperature=0.07, config=cfg)


def toy_corpus(n_per_class=4, flipped=0):
    """Two classes (0=red square, 1=blue circle). Class is encoded in the top
    left pixel; `flipped` class-1 images get class-0 pixels (forced errors)."""
    n = 2 * n_per_class
    pixels = torch.zeros(n, 3, 4, 4)
    labels = torch.zeros(n, dtype=torch.long)
    captions = []
    for i in range(n):
        label = i % 2
        labels[i] = label
        effective = label
        if label == 1 and flipped > 0 and i < 2 * flipped:
            effective = 0
        pixels[i, effective, 0, 0] = 1.0
        captions.append(f"a photo of a {class_name(label)}")
    tokens = VOCAB.encode_batch(captions, 12)
    return Corpus(ids=torch.arange(n), labels=labels, pixels=pixels,
                  tokens=tokens, captions=captions,
                  class_names=[class_name(0), class_name(1)], vocab=VOCAB)


def trigger_to_class(cls: int) -> TriggerPatch:
    patch = torch.zeros(3, 1, 1)
    patch[cls, 0, 0] = 1.0
    return TriggerPatch(patch, (0, 0), kind="fixed_pattern")


# ------------------------------------------------------------- zero-shot


def test_zero_shot_perfect_model_scores_one():
    report = eval_zero_shot(stub_pair(), toy_corpus(), n_classes=2)
    assert report.clean_accuracy == pytest.approx(1.0)
    assert report.attack_success_rate is None
    assert report.n_clean == 8
    assert report.per_class_accuracy == {0: 1.0, 1: 1.0}


def test_zero_shot_counts_forced_errors():
    # 1 of the 4 class-1 images carries class-0 pixels -> 7/8 correct
    report = eval_zero_shot(stub_pair(), toy_corpus(flipped=1), n_classes=2)
    assert report.clean_accuracy == pytest.approx(7 / 8)
    assert report.per_class_accuracy[0] == pytest.approx(1.0)
    assert report.per_class_accuracy[1] == pytest.approx(3 / 4)


def test_zero_shot_asr_measures_only_non_target_images():
    report = eval_zero_shot(stub_pair(), toy_corpus(), trigger=trigger_to_class(0),
                            target_label=0, n_classes=2)
    assert report.n_attacked == 4  # class-1 images only
    assert report.attack_success_rate == pytest.approx(1.0)
    assert report.clean_accuracy == pytest.approx(1.0)  # CA unaffected by trigger


def test_zero_shot_asr_zero_for_ineffective_trigger():
    # a trigger that pushes toward class 1 never yields target-0 predictions
    report = eval_zero_shot(stub_pair(), toy_corpus(), trigger=trigger_to_class(1),
                            target_label=0, n_classes=2)
    assert report.attack_success_rate == pytest.approx(0.0)


def test_zero_shot_requires_target_with_trigger():
    with pytest.raises(ValueError, match="target_label"):
        eval_zero_shot(stub_pair(), toy_corpus(), trigger=trigger_to_class(0))


def test_zero_shot_rejects_leaked_ids():
    corpus = toy_corpus()
    with pytest.raises(ValueError, match="training data"):
        eval_zero_shot(stub_pair(), corpus, forbidden_ids=[int(corpus.ids[0])],
                       n_classes=2)


def test_prompt_set_validation():
    with pytest.raises(ValueError, match="at least one"):
        PromptSet(templates=())
    with pytest.raises(ValueError, match="slot"):
        PromptSet(templates=("no placeholder here",))
    prompts = PromptSet(templates=("a photo of a {name}",))
    assert prompts.captions_for(0) == ["a photo of a red square"]


# ------------------------------------------------------------- linear probe


def test_probe_separable_features_reach_full_accuracy():
    train = toy_corpus(n_per_class=6)
    test = toy_corpus(n_per_class=3)
    test = Corpus(ids=test.ids + 100, labels=test.labels, pixels=test.pixels,
                  tokens=test.tokens, captions=test.captions,
                  class_names=test.class_names, vocab=test.vocab)
    report = eval_linear_probe(stub_pair(), train, test, n_classes=2)
    assert report.task == "linear_probe"
    assert report.clean_accuracy == pytest.approx(1.0)
    assert report.attack_success_rate is None


def test_probe_asr_with_effective_trigger():
    train = toy_corpus(n_per_class=6)
    test = toy_corpus(n_per_class=3)
    test = Corpus(ids=test.ids + 100, labels=test.labels, pixels=test.pixels,
                  tokens=test.tokens, captions=test.captions,
                  class_names=test.class_names, vocab=test.vocab)
    report = eval_linear_probe(stub_pair(), train, test,
                               trigger=trigger_to_class(0), target_label=0,
                               n_classes=2)
    assert report.n_attacked == 3
    assert report.attack_success_rate == pytest.approx(1.0)


def test_probe_is_deterministic():
    train = toy_corpus(n_per_class=6)
    test = toy_corpus(n_per_class=3)
    test = Corpus(ids=test.ids + 100, labels=test.labels, pixels=test.pixels,
                  tokens=test.tokens, captions=test.captions,
                  class_names=test.class_names, vocab=test.vocab)
    a = eval_linear_probe(stub_pair(), train, test, n_classes=2)
    b = eval_linear_probe(stub_pair(), train, test, n_classes=2)
    assert a.clean_accuracy == b.clean_accuracy
    assert a.per_class_accuracy == b.per_class_accuracy


def test_probe_rejects_train_test_overlap():
    corpus = toy_corpus()
    with pytest.raises(ValueError, match="share"):
        eval_linear_probe(stub_pair(), corpus, corpus, n_classes=2)


def test_probe_config_validation():
    with pytest.raises(ValueError):
        ProbeConfig(iters=0)
    with pytest.raises(ValueError):
        ProbeConfig(lr=0.0)
    with pytest.raises(ValueError):
        ProbeConfig(weight_decay=-0.1)


def test_probe_weight_decay_shrinks_decision_regions():
    # heavily regularized probe keeps in-distribution accuracy on separable
    # features but refuses confident off-manifold extrapolation less readily;
    # here we only check it still classifies the clean test set perfectly
    train = toy_corpus(n_per_class=6)
    test = toy_corpus(n_per_class=3)
    test = Corpus(ids=test.ids + 100, labels=test.labels, pixels=test.pixels,
                  tokens=test.tokens, captions=test.captions,
                  class_names=test.class_names, vocab=test.vocab)
    report = eval_linear_probe(stub_pair(), train, test, n_classes=2,
                               cfg=ProbeConfig(weight_decay=0.05))
    assert report.clean_accuracy == pytest.approx(1.0)


# ------------------------------------------------------------- results csv


def test_result_rows_round_trip(tmp_path):
    path = tmp_path / "results.csv"
    report = EvalReport(task="zero_shot", clean_accuracy=0.875,
                        attack_success_rate=None, n_clean=8, n_attacked=0)
    append_result_row(path, run_id="r1", stage="pretrain", attack="none",
                      defense="none", report=report, seed=3)
    report2 = EvalReport(task="zero_shot", clean_accuracy=0.5,
                         attack_success_rate=0.25, n_clean=8, n_attacked=4)
    append_result_row(path, run_id="r1", stage="attack", attack="badclip",
                      defense="none", report=report2, seed=3)

    rows = read_results(path)
    assert len(rows) == 2
    assert list(rows[0]) == list(RESULTS_COLUMNS)
    assert rows[0]["attack_success_rate"] == ""
    assert float(rows[1]["attack_success_rate"]) == pytest.approx(0.25)
    assert float(rows[1]["clean_accuracy"]) == pytest.approx(0.5)
    assert rows[1]["stage"] == "attack"
    assert rows[1]["seed"] == "3"
    assert "T" in rows[1]["timestamp"]  # ISO-8601


def test_read_results_rejects_missing_columns(tmp_path):
    path = tmp_path / "bad.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "stage"])
        writer.writerow(["r", "s"])
    with pytest.raises(ValueError, match="missing columns"):
        read_results(path)
