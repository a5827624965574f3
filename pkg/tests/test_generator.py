import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from multishot.config import tiny_config
from multishot.errors import ShapeMismatch
from multishot.generator import NoiseSchedule, VideoDenoiser, add_noise, diffusion_loss, guided_eps, q_sample, sample
from multishot.layers import LoRALinear


def test_schedule_values():
    s = NoiseSchedule.linear(100, 1e-4, 0.02)
    assert s.T == 100
    assert s.betas[0] == pytest.approx(1e-4) and s.betas[-1] == pytest.approx(0.02)
    np.testing.assert_allclose(s.alpha_bars, np.cumprod(1 - np.linspace(1e-4, 0.02, 100)))
    assert np.all(np.diff(s.alpha_bars) < 0)
    with pytest.raises(ValueError):
        s.alpha_bar(0)
    with pytest.raises(ValueError):
        s.alpha_bar(101)
    assert s.digest() == NoiseSchedule.linear(100, 1e-4, 0.02).digest() != NoiseSchedule.linear(50).digest()


def test_q_sample_limits():
    x0, eps = torch.randn(2, 3), torch.randn(2, 3)
    assert torch.equal(q_sample(x0, 1.0, eps), x0)
    assert torch.equal(q_sample(x0, 0.0, eps), eps)
    assert torch.equal(q_sample(torch.ones(4), 0.25, torch.zeros(4)), torch.full((4,), 0.5))
    with pytest.raises(ShapeMismatch):
        q_sample(x0, 0.5, torch.randn(3, 2))


def test_add_noise_uses_schedule():
    s = NoiseSchedule.linear(10)
    x0, eps = torch.randn(2, 4, dtype=torch.float64), torch.randn(2, 4, dtype=torch.float64)
    out = add_noise(s, x0, [1, 10], eps)
    ab = s.alpha_bars
    torch.testing.assert_close(out[1], np.sqrt(ab[9]) * x0[1] + np.sqrt(1 - ab[9]) * eps[1])


class Rigged(torch.nn.Module):
    """Recovers the noise exactly from x_t and x0, plus an optional offset."""

    def __init__(self, schedule, x0, offset=0.0):
        super().__init__()
        self.schedule, self.x0, self.offset = schedule, x0, offset

    def forward(self, x_t, t, cond):
        ab = torch.as_tensor(self.schedule.alpha_bar(t.numpy()), dtype=x_t.dtype).view(-1, 1, 1, 1, 1)
        return (x_t - ab.sqrt() * self.x0) / (1 - ab).sqrt() + self.offset


def test_loss_zero_and_constant_offset():
    s = NoiseSchedule.linear(10)
    x0 = torch.randn(2, 2, 4, 4, 3, dtype=torch.float64)
    eps = torch.randn_like(x0)
    cond = torch.zeros(2, 1, 1, dtype=torch.float64)
    assert diffusion_loss(Rigged(s, x0), s, x0, cond, [3, 7], eps).item() == pytest.approx(0.0, abs=1e-20)
    assert diffusion_loss(Rigged(s, x0, 0.3), s, x0, cond, 5, eps).item() == pytest.approx(0.09, rel=1e-9)


def test_loss_accepts_unbatched_clip(tiny_model):
    d = tiny_model.denoiser
    x0 = torch.randn(d.expected_shape)
    cond = torch.randn(tiny_model.cfg.query_len, tiny_model.cfg.d_cond)
    loss = diffusion_loss(d, tiny_model.schedule, x0, cond, 4, torch.randn_like(x0))
    assert loss.ndim == 0 and torch.isfinite(loss)
    with pytest.raises(ShapeMismatch):
        diffusion_loss(d, tiny_model.schedule, x0[None].repeat(2, 1, 1, 1, 1), cond[None].repeat(2, 1, 1), [1, 2, 3], torch.randn(2, *x0.shape))


def _finite_difference_check(loss_fn, param, index, h=1e-6):
    loss = loss_fn()
    (grad,) = torch.autograd.grad(loss, param)
    with torch.no_grad():
        orig = param[index].item()
        param[index] = orig + h
        up = loss_fn().item()
        param[index] = orig - h
        down = loss_fn().item()
        param[index] = orig
    numeric = (up - down) / (2 * h)
    return grad[index].item(), numeric


def test_denoiser_gradient_matches_finite_difference(tiny_cfg):
    from multishot.model import StoryModel

    model = StoryModel(tiny_cfg).double()
    d = model.denoiser
    g = torch.Generator().manual_seed(0)
    x0 = torch.rand(d.expected_shape, generator=g, dtype=torch.float64) * 2 - 1
    eps = torch.randn(d.expected_shape, generator=g, dtype=torch.float64)
    cond = torch.randn(tiny_cfg.query_len, tiny_cfg.d_cond, generator=g, dtype=torch.float64)
    param = d.blocks[0].cross.q.base.weight
    fn = lambda: diffusion_loss(d, model.schedule, x0, cond, 5, eps)  # noqa: E731
    analytic, numeric = _finite_difference_check(fn, param, (1, 2))
    assert abs(analytic - numeric) / max(abs(numeric), 1e-12) < 1e-4


def test_guidance_formula_endpoints():
    c, u = torch.randn(5), torch.randn(5)
    assert torch.equal(guided_eps(c, u, 0.0), u)
    assert torch.equal(guided_eps(c, u, 1.0), c)
    torch.testing.assert_close(guided_eps(c, u, 6.0), u + 6.0 * (c - u))


def _run(model, cond, uncond, w, seed, record=None):
    cb = None if record is None else (lambda t, e, ec, eu: record.append((e.clone(), ec.clone(), eu.clone())))
    return sample(model.denoiser, model.schedule, cond, uncond, w, seed, model.denoiser.expected_shape, callback=cb)


def test_sampling_guidance_zero_is_unconditional(tiny_model):
    q, d = tiny_model.cfg.query_len, tiny_model.cfg.d_cond
    g = torch.Generator().manual_seed(1)
    cond, uncond = torch.randn(q, d, generator=g), torch.randn(q, d, generator=g)
    with torch.no_grad():
        a = _run(tiny_model, cond, uncond, 0.0, 11)
        b = _run(tiny_model, uncond, uncond, 1.0, 11)
    assert torch.equal(a, b)


def test_sampling_guidance_one_uses_conditional_eps(tiny_model):
    q, d = tiny_model.cfg.query_len, tiny_model.cfg.d_cond
    cond, uncond = torch.randn(q, d), torch.randn(q, d)
    steps = []
    _run(tiny_model, cond, uncond, 1.0, 3, steps)
    assert len(steps) == tiny_model.schedule.T
    assert all(torch.equal(e, ec) for e, ec, _ in steps)


def test_sampling_is_deterministic_and_bounded(tiny_model):
    q, d = tiny_model.cfg.query_len, tiny_model.cfg.d_cond
    cond = torch.randn(q, d)
    a = _run(tiny_model, cond, torch.zeros(q, d), 6.0, 5)
    b = _run(tiny_model, cond, torch.zeros(q, d), 6.0, 5)
    c = _run(tiny_model, cond, torch.zeros(q, d), 6.0, 6)
    assert torch.equal(a, b) and not torch.equal(a, c)
    assert a.shape == tiny_model.denoiser.expected_shape
    assert a.min() >= -1 and a.max() <= 1


def test_negative_guidance_rejected(tiny_model):
    q, d = tiny_model.cfg.query_len, tiny_model.cfg.d_cond
    with pytest.raises(ValueError):
        _run(tiny_model, torch.zeros(q, d), torch.zeros(q, d), -1.0, 0)


@settings(max_examples=15, deadline=None)
@given(
    st.sampled_from([4, 8]), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(1, 6), st.integers(0, 1000)
)
def test_denoiser_preserves_shape(patch, grid, frames, batch, q, seed):
    cfg = tiny_config(image_size=patch * grid, gen_patch=patch, frames=frames, query_len=q, mllm_patch=patch)
    torch.manual_seed(seed)
    d = VideoDenoiser(cfg)
    x = torch.randn(batch, *d.expected_shape)
    with torch.no_grad():
        out = d(x, torch.randint(1, cfg.timesteps + 1, (batch,)), torch.randn(batch, q, cfg.d_cond))
    assert out.shape == x.shape


def test_denoiser_rejects_wrong_shapes(tiny_model):
    d = tiny_model.denoiser
    x = torch.randn(1, *d.expected_shape)
    with pytest.raises(ShapeMismatch):
        d(x[:, :, :8], torch.tensor([1]), torch.randn(1, 4, tiny_model.cfg.d_cond))
    with pytest.raises(ShapeMismatch):
        d(x, torch.tensor([1]), torch.randn(2, 4, tiny_model.cfg.d_cond))


def test_patchify_round_trip(tiny_model):
    d = tiny_model.denoiser
    x = torch.randn(2, *d.expected_shape)
    assert torch.equal(d.unpatchify(d.patchify(x), x.shape[1]), x)


def test_lora_starts_as_identity_delta():
    torch.manual_seed(0)
    layer = LoRALinear(6, 4, rank=2, alpha=4.0)
    x = torch.randn(3, 6)
    torch.testing.assert_close(layer(x), layer.base(x))
    with torch.no_grad():
        layer.lora_b.fill_(0.1)
    delta = (x @ layer.lora_a.t() @ layer.lora_b.t()) * 2.0
    torch.testing.assert_close(layer(x), layer.base(x) + delta)
