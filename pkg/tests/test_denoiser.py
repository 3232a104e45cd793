import numpy as np
import pytest
import torch

from latentplan.denoiser import (
    PRESETS,
    Denoiser,
    DenoiserConfig,
    DiffusionSchedule,
    MaskSpec,
    apply_mask,
    reverse_mean,
    sample_mask,
)
from latentplan.seeding import numpy_rng, torch_generator

CFG = DenoiserConfig(n_max=6, d=16, n_layers=2, n_heads=2, d_ff=32, max_prompt_len=10, t_steps=4)


@pytest.fixture()
def model():
    m = Denoiser(CFG)
    m.reset_parameters(torch_generator(0, "test-init"))
    return m


def make_inputs(b=3, m=5, gen_label="test-in"):
    gen = torch_generator(1, gen_label)
    vt = torch.randn(b, CFG.n_max, CFG.d, generator=gen)
    prompt = torch.randn(b, m, CFG.d, generator=gen)
    slot_mask = torch.zeros(b, CFG.n_max, dtype=torch.bool)
    slot_mask[:, :4] = True
    prompt_mask = torch.ones(b, m, dtype=torch.bool)
    return vt, prompt, slot_mask, prompt_mask


def test_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(d=10, n_heads=4)
    with pytest.raises(ValueError):
        DenoiserConfig(t_steps=0)


def test_presets_exist():
    assert set(PRESETS) == {"desk", "tiny", "paper-scale"}
    assert PRESETS["desk"].n_max == 16
    assert PRESETS["desk"].d == 64
    assert PRESETS["desk"].n_layers == 4


def test_schedule_linear_in_t():
    sched = DiffusionSchedule(t_steps=8, sigma_max=0.1)
    assert sched.sigma(8) == pytest.approx(0.1)
    assert sched.sigma(1) == pytest.approx(0.0125)
    assert sched.sigma(4) == pytest.approx(0.05)
    for t in range(1, 8):
        assert sched.sigma(t) < sched.sigma(t + 1)


def test_schedule_bounds():
    sched = DiffusionSchedule(t_steps=8, sigma_max=0.1)
    with pytest.raises(ValueError):
        sched.sigma(0)
    with pytest.raises(ValueError):
        sched.sigma(9)
    with pytest.raises(ValueError):
        DiffusionSchedule(t_steps=8, sigma_max=0.0)


def test_sample_mask_respects_active_slots():
    s = torch.tensor([1.0, 1.0, 1.0, 0.0, 0.0])
    rng = numpy_rng(0, "mask")
    for _ in range(50):
        spec = sample_mask(s, 0.7, rng)
        assert all(i < 3 for i in spec.indices)


def test_sample_mask_extremes():
    s = torch.ones(5)
    rng = numpy_rng(0, "mask")
    assert sample_mask(s, 0.0, rng).indices == ()
    assert sample_mask(s, 1.0, rng).indices == (0, 1, 2, 3, 4)


def test_sample_mask_rate_bounds():
    with pytest.raises(ValueError):
        sample_mask(torch.ones(3), 1.5, numpy_rng(0, "m"))


def test_mask_spec_validation():
    with pytest.raises(ValueError):
        MaskSpec(indices=(1, 1), rate=0.5)
    with pytest.raises(ValueError):
        MaskSpec(indices=(0,), rate=-0.1)


def test_apply_mask(model):
    plan_v = torch.randn(CFG.n_max, CFG.d, generator=torch_generator(2, "plan"))
    s = torch.tensor([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
    spec = MaskSpec(indices=(0, 2), rate=0.5)
    out = apply_mask(plan_v, s, spec, model)
    assert torch.equal(out[0], model.mask_embedding.detach())
    assert torch.equal(out[2], model.mask_embedding.detach())
    assert torch.equal(out[1], plan_v[1])
    with pytest.raises(ValueError):
        apply_mask(plan_v, s, MaskSpec(indices=(4,), rate=0.5), model)
    with pytest.raises(IndexError):
        apply_mask(plan_v, s, MaskSpec(indices=(7,), rate=0.5), model)


def test_forward_shapes_and_ranges(model):
    vt, prompt, slot_mask, prompt_mask = make_inputs()
    v0_hat, s_hat = model(vt, prompt, slot_mask, prompt_mask, step=2)
    assert v0_hat.shape == (3, CFG.n_max, CFG.d)
    assert s_hat.shape == (3, CFG.n_max)
    assert torch.all(s_hat > 0) and torch.all(s_hat < 1)


def test_forward_validates_shapes(model):
    vt, prompt, slot_mask, prompt_mask = make_inputs()
    with pytest.raises(ValueError):
        model(vt[:, :3], prompt)
    with pytest.raises(ValueError):
        model(vt, torch.randn(3, CFG.max_prompt_len + 1, CFG.d))
    with pytest.raises(ValueError):
        model(vt, prompt, step=CFG.t_steps + 1)
    with pytest.raises(ValueError):
        model(vt, prompt, step=-1)


def test_step_zero_initialized_to_noop(model):
    """Right after init, conditioning on any step must be a no-op."""
    vt, prompt, slot_mask, prompt_mask = make_inputs()
    base, _ = model(vt, prompt, slot_mask, prompt_mask, step=0)
    for t in range(1, CFG.t_steps + 1):
        out, _ = model(vt, prompt, slot_mask, prompt_mask, step=t)
        assert torch.equal(out, base)
    nostep, _ = model(vt, prompt, slot_mask, prompt_mask, step=None)
    assert torch.equal(nostep, base)


def test_padded_slots_do_not_leak(model):
    """Active-slot outputs are invariant to padded-slot input values."""
    vt, prompt, slot_mask, prompt_mask = make_inputs()
    a, sa = model(vt, prompt, slot_mask, prompt_mask, step=1)
    vt2 = vt.clone()
    vt2[:, 4:] = 999.0
    b, sb = model(vt2, prompt, slot_mask, prompt_mask, step=1)
    assert torch.allclose(a[:, :4], b[:, :4], atol=1e-5)
    assert torch.allclose(sa[:, :4], sb[:, :4], atol=1e-5)


def test_prompt_mask_blocks_padding(model):
    vt, prompt, slot_mask, prompt_mask = make_inputs()
    prompt_mask[:, 3:] = False
    a, _ = model(vt, prompt, slot_mask, prompt_mask, step=1)
    prompt2 = prompt.clone()
    prompt2[:, 3:] = -777.0
    b, _ = model(vt, prompt2, slot_mask, prompt_mask, step=1)
    assert torch.allclose(a, b, atol=1e-5)


def test_reverse_mean_zeroes_padding(model):
    vt, prompt, slot_mask, prompt_mask = make_inputs()
    mu = reverse_mean(model, vt, prompt, 2, slot_mask, prompt_mask)
    assert torch.all(mu[:, 4:] == 0)
    assert torch.any(mu[:, :4] != 0)
    with pytest.raises(ValueError):
        reverse_mean(model, vt, prompt, 0, slot_mask, prompt_mask)
    with pytest.raises(ValueError):
        reverse_mean(model, vt, prompt, CFG.t_steps + 1, slot_mask, prompt_mask)


def test_init_deterministic():
    m1 = Denoiser(CFG)
    m1.reset_parameters(torch_generator(5, "init"))
    m2 = Denoiser(CFG)
    m2.reset_parameters(torch_generator(5, "init"))
    for p1, p2 in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(p1, p2)


def test_reset_restores_after_training():
    m = Denoiser(CFG)
    m.reset_parameters(torch_generator(5, "init"))
    before = {k: v.clone() for k, v in m.state_dict().items()}
    with torch.no_grad():
        for p in m.parameters():
            p.add_(0.5)
    m.reset_parameters(torch_generator(5, "init"))
    after = m.state_dict()
    for k in before:
        assert torch.equal(before[k], after[k]), k


def test_forward_batch_consistency(model):
    """Each batch element is processed independently."""
    vt, prompt, slot_mask, prompt_mask = make_inputs()
    full, _ = model(vt, prompt, slot_mask, prompt_mask, step=1)
    one, _ = model(vt[1:2], prompt[1:2], slot_mask[1:2], prompt_mask[1:2], step=1)
    assert torch.allclose(full[1], one[0], atol=1e-6)
