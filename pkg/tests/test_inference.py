import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from instructedit.denoiser import ConditionBundle, Denoiser, DenoiserConfig
from instructedit.exceptions import DegenerateSizeError, InvalidRangeError
from instructedit.inference import (
    DESK_GUIDANCE,
    GuidanceConfig,
    combine_guidance,
    contact_sheet,
    edit_image,
    guided_noise,
    mask_delta,
    sample_batch,
    staged_sample,
    working_size,
)
from instructedit.schedule import build_linear_schedule
from instructedit.synth import synth_world

CFG = DenoiserConfig(base_width=8, depth=1, embed_dim=16, vocab_size=64, num_timesteps=50)
SCHED = build_linear_schedule(50)
FAST = GuidanceConfig(num_steps=5, resize_shorter_side=8)


@pytest.fixture(scope="module")
def model():
    return Denoiser(CFG).eval()


def branches(model, x, img, toks, t):
    b = x.shape[0]
    null = model.text_encoder.null_tokens(b)
    no = torch.ones(b, dtype=torch.bool)
    yes = torch.zeros(b, dtype=torch.bool)
    with torch.no_grad():
        e_unc = model(x, ConditionBundle(img, null, no, no), t)
        e_img = model(x, ConditionBundle(img, null, yes, no), t)
        e_full = model(x, ConditionBundle(img, toks, yes, yes), t)
    return e_full, e_img, e_unc


def test_unit_scales_give_full_branch_exactly(model):
    x = torch.randn(2, 3, 8, 8)
    img = torch.randn(2, 3, 8, 8)
    toks, _ = model.tokenize(["add a red square", "remove it"])
    e_full, _, _ = branches(model, x, img, toks, 10)
    with torch.no_grad():
        out = guided_noise(model, x, img, toks, 10, GuidanceConfig(1.0, 1.0))
    assert torch.equal(out, e_full)


def test_text_off_gives_image_branch_exactly(model):
    x = torch.randn(1, 3, 8, 8)
    img = torch.randn(1, 3, 8, 8)
    toks, _ = model.tokenize(["add a red square"])
    _, e_img, _ = branches(model, x, img, toks, 3)
    with torch.no_grad():
        out = guided_noise(model, x, img, toks, 3, GuidanceConfig(0.0, 1.0))
    assert torch.equal(out, e_img)


def test_default_scales_match_closed_form(model):
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    img = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    m = Denoiser(CFG).double().eval()
    toks, _ = m.tokenize(["add a red square", "remove it"])
    e_full, e_img, e_unc = branches(m, x, img, toks, 20)
    with torch.no_grad():
        out = guided_noise(m, x, img, toks, 20, GuidanceConfig())
    oracle = e_unc + 1.5 * (e_img - e_unc) + 10.0 * (e_full - e_img)
    assert float((out - oracle).abs().max()) <= 1e-10


@settings(max_examples=100, deadline=None)
@given(s_t=st.floats(-20, 20), s_i=st.floats(-20, 20), seed=st.integers(0, 1000))
def test_weight_form_equals_textbook_form(s_t, s_i, seed):
    g = np.random.default_rng(seed)
    f, i, u = (g.standard_normal(6) for _ in range(3))
    out = combine_guidance(f, i, u, GuidanceConfig(s_t, s_i))
    np.testing.assert_allclose(out, u + s_i * (i - u) + s_t * (f - i), rtol=1e-10, atol=1e-10)


def test_guidance_validation():
    with pytest.raises(InvalidRangeError):
        GuidanceConfig(num_steps=0)
    with pytest.raises(InvalidRangeError):
        GuidanceConfig(text_scale=float("inf"))
    assert GuidanceConfig() == GuidanceConfig(10.0, 1.5, 50, 512)


def test_working_size():
    assert working_size(300, 600, GuidanceConfig()) == (512, 1024)
    assert working_size(16, 16, DESK_GUIDANCE) == (16, 16)
    assert working_size(9, 9, FAST, multiple=2) == (8, 8)


def test_edit_shapes_and_determinism(model):
    img = synth_world(1, seed=0)[0].original
    a = edit_image(model, SCHED, img, "add a red square", FAST, seed=3)
    b = edit_image(model, SCHED, img, "add a red square", FAST, seed=3)
    c = edit_image(model, SCHED, img, "add a red square", FAST, seed=4)
    assert a.shape == (8, 8, 3) and a.dtype == np.uint8
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_batch_equals_singles(model):
    pairs = synth_world(3, seed=1)
    imgs = [p.original for p in pairs]
    texts = [p.instruction for p in pairs]
    batch = sample_batch(model, SCHED, imgs, texts, FAST, seed=0)
    assert batch.shape == (3, 8, 8, 3)


def test_windows(model):
    img = synth_world(1, seed=2)[0].original
    text = "remove the red square"
    full = edit_image(model, SCHED, img, text, FAST, seed=1)
    assert np.array_equal(staged_sample(model, SCHED, img, text, (0, 5), FAST, seed=1), full)
    null = edit_image(model, SCHED, img, "", FAST, seed=1)
    assert np.array_equal(staged_sample(model, SCHED, img, text, (0, 0), FAST, seed=1), null)
    with pytest.raises(InvalidRangeError):
        staged_sample(model, SCHED, img, text, (2, 6), FAST)
    with pytest.raises(InvalidRangeError):
        staged_sample(model, SCHED, img, text, (3, 2), FAST)


def test_degenerate_size(model):
    with pytest.raises(DegenerateSizeError):
        edit_image(model, SCHED, np.zeros((1, 1, 3), np.uint8), "x",
                   GuidanceConfig(num_steps=1, resize_shorter_side=1))


def test_mask_delta_and_sheet():
    a = np.zeros((4, 4, 3), np.uint8)
    b = a.copy()
    b[0, 0] = 255
    mask = np.zeros((4, 4), bool)
    mask[0, :2] = True
    assert mask_delta(a, b, mask) == pytest.approx(0.5)
    assert mask_delta(a, b, np.zeros((4, 4), bool)) == 0.0
    assert contact_sheet([a, b], gap=1).shape == (4, 9, 3)
