"""Trigger stamping and optimization: closed-form loss oracles, gradient
checks against finite differences, and the frozen-model guarantee."""

import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from mclab.artifacts import model_hash
from mclab.model import ModelConfig, build_model, encode_image, encode_text
from mclab.triggers import (TriggerOptConfig, TriggerPatch, apply_trigger,
                            build_target_text_embedding, default_position,
                            load_trigger, loss_textual, loss_total,
                            loss_visual_neg, loss_visual_pos, make_blend_pattern,
                            make_fixed_patch, optimize_trigger, save_trigger)

# -------------------------------------------------------------- stamping


def test_patch_at_corner_changes_exactly_patch_pixels():
    image = torch.zeros(2, 3, 64, 64)
    trigger = TriggerPatch(torch.ones(3, 16, 16), (48, 48), kind="fixed_pattern")
    out = apply_trigger(image, trigger)
    assert int((out != image).sum()) == 2 * 3 * 16 * 16
    assert torch.equal(out[:, :, 48:, 48:], torch.ones(2, 3, 16, 16))
    assert torch.equal(image, torch.zeros(2, 3, 64, 64))  # input untouched


def test_patch_out_of_bounds_raises():
    trigger = TriggerPatch(torch.ones(3, 16, 16), (49, 49), kind="fixed_pattern")
    with pytest.raises(ValueError, match="does not fit"):
        apply_trigger(torch.zeros(1, 3, 64, 64), trigger)


def test_single_image_stamping_keeps_rank():
    trigger = TriggerPatch(torch.ones(3, 4, 4), (0, 0), kind="fixed_pattern")
    out = apply_trigger(torch.zeros(3, 8, 8), trigger)
    assert out.shape == (3, 8, 8)
    assert float(out[:, :4, :4].min()) == 1.0


def test_blended_trigger_is_convex_combination():
    image = torch.zeros(1, 3, 8, 8)
    pattern = torch.ones(3, 8, 8)
    trigger = TriggerPatch(pattern, (0, 0), kind="blended", blend_alpha=0.2)
    out = apply_trigger(image, trigger)
    assert torch.allclose(out, torch.full_like(out, 0.2))


def test_blended_requires_matching_size_and_alpha():
    with pytest.raises(ValueError, match="blend_alpha"):
        TriggerPatch(torch.ones(3, 8, 8), (0, 0), kind="blended")
    trigger = TriggerPatch(torch.ones(3, 4, 4), (0, 0), kind="blended",
                           blend_alpha=0.5)
    with pytest.raises(ValueError, match="blended pattern"):
        apply_trigger(torch.zeros(1, 3, 8, 8), trigger)


def test_trigger_patch_validation():
    with pytest.raises(ValueError, match="kind"):
        TriggerPatch(torch.ones(3, 4, 4), (0, 0), kind="sticker")
    with pytest.raises(ValueError, match="3, h, w"):
        TriggerPatch(torch.ones(4, 4), (0, 0))


@given(st.integers(min_value=0, max_value=10_000))
def test_stamp_touches_only_patch_region(seed):
    gen = torch.Generator().manual_seed(seed)
    size = int(torch.randint(2, 7, (1,), generator=gen))
    r = int(torch.randint(0, 16 - size + 1, (1,), generator=gen))
    c = int(torch.randint(0, 16 - size + 1, (1,), generator=gen))
    image = torch.rand(1, 3, 16, 16, generator=gen)
    patch = torch.rand(3, size, size, generator=gen)
    out = apply_trigger(image, TriggerPatch(patch, (r, c), kind="fixed_pattern"))
    assert torch.equal(out[0, :, r:r + size, c:c + size], patch)
    mask = torch.ones(1, 3, 16, 16, dtype=torch.bool)
    mask[0, :, r:r + size, c:c + size] = False
    assert torch.equal(out[mask], image[mask])


# -------------------------------------------------------------- loss oracles


def test_loss_textual_closed_form():
    # pos similarity 1, three negatives at 0, temperature 1:
    # -log(e / (e + 3))
    img = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    target = torch.tensor([1.0, 0.0], dtype=torch.float64)
    negs = torch.tensor([[0.0, 1.0], [0.0, -1.0], [0.0, 1.0]], dtype=torch.float64)
    expected = math.log((math.e + 3.0) / math.e)
    got = float(loss_textual(img, target, negs, temperature=1.0))
    assert abs(got - expected) < 1e-12


def test_loss_textual_batch_mean():
    img = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    target = torch.tensor([1.0, 0.0], dtype=torch.float64)
    negs = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    one = float(loss_textual(img[:1], target, negs, 0.5))
    both = float(loss_textual(img, target, negs, 0.5))
    assert abs(one - both) < 1e-12


def test_loss_textual_validation():
    img = torch.ones(1, 2)
    with pytest.raises(ValueError, match="temperature"):
        loss_textual(img, torch.ones(2), torch.ones(1, 2), 0.0)
    with pytest.raises(ValueError, match="negative caption"):
        loss_textual(img, torch.ones(2), torch.ones(0, 2), 1.0)


def test_loss_visual_pos_cyclic_pairing():
    stamped = torch.tensor([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    targets = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
    # pairs: (0, t0) cos 1 -> 0 ; (1, t1) cos 0 -> 1 ; (2, t0) cos -1 -> 2
    assert float(loss_visual_pos(stamped, targets)) == pytest.approx(1.0)
    with pytest.raises(ValueError, match="empty"):
        loss_visual_pos(stamped, torch.zeros(0, 2))


def test_loss_visual_neg_frozen_value():
    emb = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    clean = torch.tensor([[0.0, 1.0], [0.0, 1.0]])
    # distances: 1, 0 -> mean 0.5 -> negated
    assert float(loss_visual_neg(emb, clean)) == pytest.approx(-0.5)
    with pytest.raises(ValueError, match="align"):
        loss_visual_neg(emb, clean[:1])


def test_loss_total_frozen_value():
    l_text = torch.tensor(1.0)
    l_pos = torch.tensor(0.75)
    l_neg = torch.tensor(-0.5)
    # 1 + 500 * max(0, 0.75 - 0.5 + 1) = 1 + 500 * 1.25 = 626
    total = loss_total(l_text, l_pos, l_neg, hinge_weight=500.0, neg_weight=1.0,
                       margin=1.0)
    assert float(total) == pytest.approx(626.0)


def test_loss_total_hinge_inactive():
    total = loss_total(torch.tensor(2.0), torch.tensor(0.0), torch.tensor(-2.0),
                       hinge_weight=500.0, neg_weight=1.0, margin=1.0)
    assert float(total) == pytest.approx(2.0)


def test_loss_total_gradient_switches_with_hinge():
    # active hinge: 0.75 - 0.5 + 1 > 0 -> d/dpos = hinge_weight
    # inactive hinge: 0.0 - 2.0 + 1 < 0 -> d/dpos = 0
    for pos_val, neg_val, expected_grad in ((0.75, -0.5, 500.0), (0.0, -2.0, 0.0)):
        l_pos = torch.tensor(pos_val, requires_grad=True)
        total = loss_total(torch.tensor(1.0), l_pos, torch.tensor(neg_val),
                           hinge_weight=500.0, neg_weight=1.0, margin=1.0)
        total.backward()
        assert float(l_pos.grad) == pytest.approx(expected_grad)


def test_loss_total_text_weight_scales_text_term():
    total = loss_total(torch.tensor(3.0), torch.tensor(0.0), torch.tensor(-2.0),
                       hinge_weight=500.0, neg_weight=1.0, margin=1.0,
                       text_weight=0.0)
    assert float(total) == pytest.approx(0.0)


# ------------------------------------------------------- gradient vs FD


def _fd_loss(pair, patch, images, target_text, neg_text, target_emb, clean_emb):
    trigger = TriggerPatch(patch, (3, 3), kind="optimized")
    emb = encode_image(apply_trigger(images, trigger), pair)
    l_t = loss_textual(emb, target_text, neg_text, pair.temperature)
    l_p = loss_visual_pos(emb, target_emb)
    l_n = loss_visual_neg(emb, clean_emb)
    return loss_total(l_t, l_p, l_n, 500.0, 1.0, 1.0)


def test_patch_gradient_matches_finite_differences():
    cfg = ModelConfig(image_size=8, conv_channels=(8,), gn_groups=4, embed_dim=8,
                      vocab_size=16, max_caption_len=6, text_width=8)
    pair = build_model(cfg, seed=1).double()
    gen = torch.Generator().manual_seed(0)
    images = torch.rand(4, 3, 8, 8, generator=gen, dtype=torch.float64)
    targets = torch.rand(2, 3, 8, 8, generator=gen, dtype=torch.float64)
    tokens = torch.randint(0, 16, (3, 6), generator=gen)
    with torch.no_grad():
        target_emb = encode_image(targets, pair)
        clean_emb = encode_image(images, pair)
        text_embs = encode_text(tokens, pair)
    target_text, neg_text = text_embs[0], text_embs[1:]

    patch = torch.rand(3, 2, 2, generator=gen, dtype=torch.float64)
    patch.requires_grad_(True)
    loss = _fd_loss(pair, patch, images, target_text, neg_text, target_emb,
                    clean_emb)
    loss.backward()
    grad = patch.grad.clone()

    h = 1e-6
    flat = patch.detach().flatten()
    for idx in [0, 3, 5, 8, 11]:
        probe = flat.clone()
        with torch.no_grad():
            probe[idx] += h
            up = _fd_loss(pair, probe.reshape(3, 2, 2), images, target_text,
                          neg_text, target_emb, clean_emb)
            probe[idx] -= 2 * h
            down = _fd_loss(pair, probe.reshape(3, 2, 2), images, target_text,
                            neg_text, target_emb, clean_emb)
        fd = float(up - down) / (2 * h)
        auto = float(grad.flatten()[idx])
        denom = max(abs(fd), abs(auto), 1e-8)
        assert abs(fd - auto) / denom < 1e-3, (idx, fd, auto)


# ------------------------------------------------------- optimize_trigger


def test_optimize_trigger_freezes_model_and_clamps(trained_pair, tiny_split):
    before = model_hash(trained_pair)
    cfg = TriggerOptConfig(patch_size=6, epochs=2, batch_size=16,
                           max_target_images=8, seed=0)
    trigger, trace = optimize_trigger(trained_pair, tiny_split.attacker_pool, 0, cfg)
    assert model_hash(trained_pair) == before
    assert trigger.kind == "optimized"
    assert trigger.position == default_position(32, 6)
    assert float(trigger.pixels.min()) >= 0.0
    assert float(trigger.pixels.max()) <= 1.0
    assert [t["epoch"] for t in trace] == [0, 1]
    assert set(trace[0]) == {"epoch", "loss_total", "loss_textual",
                             "loss_visual_pos", "loss_visual_neg"}


def test_optimize_trigger_is_deterministic(trained_pair, tiny_split):
    cfg = TriggerOptConfig(patch_size=4, epochs=1, batch_size=16,
                           max_target_images=8, seed=5)
    t1, _ = optimize_trigger(trained_pair, tiny_split.attacker_pool, 1, cfg)
    t2, _ = optimize_trigger(trained_pair, tiny_split.attacker_pool, 1, cfg)
    assert torch.equal(t1.pixels, t2.pixels)


def test_optimize_trigger_warns_when_loss_stalls(trained_pair, tiny_split):
    cfg = TriggerOptConfig(patch_size=4, epochs=5, batch_size=16, lr=0.0,
                           max_target_images=8, seed=0)
    with pytest.warns(RuntimeWarning, match="not decreased"):
        optimize_trigger(trained_pair, tiny_split.attacker_pool, 0, cfg)


def test_optimize_trigger_validates_inputs(trained_pair, tiny_split):
    with pytest.raises(ValueError, match="no images"):
        optimize_trigger(trained_pair, tiny_split.attacker_pool, 99,
                         TriggerOptConfig(epochs=1))
    with pytest.raises(ValueError, match="not enough non-target"):
        optimize_trigger(trained_pair, tiny_split.attacker_pool, 0,
                         TriggerOptConfig(epochs=1, batch_size=64,
                                          max_target_images=8))


def test_trigger_opt_config_validation():
    with pytest.raises(ValueError):
        TriggerOptConfig(patch_size=0)
    with pytest.raises(ValueError):
        TriggerOptConfig(epochs=0)
    with pytest.raises(ValueError):
        TriggerOptConfig(batch_size=1)


# ------------------------------------------------------- fixed patterns


def test_fixed_patch_is_checkerboard():
    patch = make_fixed_patch(8, cell=2)
    assert patch.shape == (3, 8, 8)
    assert set(patch.unique().tolist()) == {0.0, 1.0}
    assert patch[0, 0, 0] == 0.0 and patch[0, 0, 2] == 1.0
    assert patch[0, 2, 0] == 1.0 and patch[0, 2, 2] == 0.0
    assert torch.equal(patch[0], patch[1])


def test_blend_pattern_deterministic_and_in_range():
    a = make_blend_pattern(16, seed=4)
    b = make_blend_pattern(16, seed=4)
    c = make_blend_pattern(16, seed=5)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)
    assert a.shape == (3, 16, 16)
    assert float(a.min()) >= 0.0 and float(a.max()) <= 1.0


def test_trigger_save_load_round_trip(tmp_path, trained_pair):
    trigger = TriggerPatch(torch.rand(3, 5, 5), (2, 7), kind="optimized")
    cfg = TriggerOptConfig(patch_size=5)
    save_trigger(trigger, tmp_path / "t.trig", victim_hash=model_hash(trained_pair),
                 opt_config=cfg, target_label=3)
    loaded, header = load_trigger(tmp_path / "t.trig")
    assert torch.equal(loaded.pixels, trigger.pixels)
    assert loaded.position == (2, 7)
    assert loaded.kind == "optimized"
    assert header["victim_model_hash"] == model_hash(trained_pair)
    assert header["target_label"] == 3
    assert header["opt_config"]["patch_size"] == 5


def test_target_text_embedding_is_normalized(trained_pair, tiny_corpus):
    emb = build_target_text_embedding(trained_pair, tiny_corpus, 0)
    assert emb.shape == (trained_pair.config.embed_dim,)
    assert float(emb.norm()) == pytest.approx(1.0, abs=1e-5)
