import math

import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from coemogen.diffusion import (DenoiserConfig, IdentityLatentEncoder, NoiseSchedule, ToyUNet, add_noise, guided_eps,
                                ldm_loss, sample)
from coemogen.errors import AdapterError, ScheduleError
from coemogen.hilora import attach_to_denoiser

CFG = DenoiserConfig(channels=(8, 16, 16), context_dim=16, heads=2)


class EchoNoise(nn.Module):
    """Stub that recovers the injected noise exactly from (z_t, t) given z0."""

    def __init__(self, z0, schedule, offset=0.0):
        super().__init__()
        self.z0, self.schedule, self.offset = z0, schedule, offset

    def forward(self, zt, t, context, context_bias=None):
        a, s = self.schedule.coefficients(t, torch.float64)
        a, s = a.reshape(-1, 1, 1, 1), s.reshape(-1, 1, 1, 1)
        return ((zt.double() - a * self.z0.double()) / s).to(zt.dtype) + self.offset


def test_schedule_invariants():
    for T in (10, 50, 1000):
        s = NoiseSchedule(T)
        assert ((s.betas > 0) & (s.betas < 1)).all()
        assert (s.alphas_cumprod[1:] < s.alphas_cumprod[:-1]).all()
    assert NoiseSchedule(1000).betas[0].item() == pytest.approx(1e-4)
    with pytest.raises(ScheduleError):
        NoiseSchedule(1)


def test_t_range():
    s = NoiseSchedule(50)
    with pytest.raises(ScheduleError):
        add_noise(torch.zeros(1, 3), 50, torch.zeros(1, 3), s)
    with pytest.raises(ScheduleError):
        add_noise(torch.zeros(1, 3), -1, torch.zeros(1, 3), s)


def test_add_noise_examples():
    s = NoiseSchedule(50)
    z0, noise = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
    long = NoiseSchedule(1000)
    assert long.coefficients(0)[1].item() == pytest.approx(0.01, rel=1e-3)
    assert (add_noise(z0, 0, noise, long) - z0).abs().max() <= 0.01 * noise.abs().max() + 1e-6
    t = torch.tensor([3, 40])
    zt = add_noise(z0, t, torch.zeros_like(z0), s)
    for i in range(2):
        assert torch.equal(zt[i], (s.alphas_cumprod[t[i]].sqrt().float() * z0[i]))
    full = add_noise(z0, t, noise, s)
    for i in range(2):
        acp = s.alphas_cumprod[t[i]].item()
        assert torch.allclose(full[i], math.sqrt(acp) * z0[i] + math.sqrt(1 - acp) * noise[i], atol=1e-6)


@given(st.integers(0, 49))
@settings(max_examples=15, deadline=None)
def test_variance_preservation(t):
    g = torch.Generator().manual_seed(t)
    z0, n = torch.randn(20000, generator=g), torch.randn(20000, generator=g)
    assert add_noise(z0, t, n, NoiseSchedule(50)).var().item() == pytest.approx(1.0, abs=0.05)


def test_identity_latent_round_trip():
    x = torch.rand(2, 3, 8, 8)
    enc = IdentityLatentEncoder()
    assert torch.equal(enc.decode(enc.encode(x)), x)


def test_unet_shape():
    torch.manual_seed(0)
    net = ToyUNet(CFG)
    x = torch.randn(2, 3, 32, 32)
    assert net(x, torch.tensor([0, 9]), torch.randn(2, 4, 16)).shape == x.shape
    assert net(x, 3, torch.randn(4, 16)).shape == x.shape


def test_ldm_loss_stubs():
    s = NoiseSchedule(50)
    z0, noise = torch.randn(3, 3, 8, 8), torch.randn(3, 3, 8, 8)
    t = torch.tensor([1, 20, 45])
    assert ldm_loss(z0, None, t, noise, EchoNoise(z0, s), s).item() == pytest.approx(0.0, abs=1e-10)
    assert ldm_loss(z0, None, t, noise, EchoNoise(z0, s, 1.0), s).item() == pytest.approx(1.0, abs=1e-6)


def test_ldm_loss_requires_routing():
    torch.manual_seed(0)
    model = attach_to_denoiser(ToyUNet(CFG))
    s = NoiseSchedule(50)
    z0 = torch.randn(1, 3, 32, 32)
    with pytest.raises(AdapterError):
        ldm_loss(z0, torch.randn(1, 2, 16), 3, torch.randn_like(z0), model, s)
    with model.routed("awe"):
        with pytest.raises(AdapterError):
            ldm_loss(z0, torch.randn(1, 2, 16), 3, torch.randn_like(z0), model, s, emotion="fear")
        assert ldm_loss(z0, torch.randn(1, 2, 16), 3, torch.randn_like(z0), model, s, emotion="awe") >= 0


def test_ldm_gradient_through_one_adapter_entry():
    torch.manual_seed(1)
    model = attach_to_denoiser(ToyUNet(DenoiserConfig(channels=(8, 8, 8), context_dim=8, heads=2))).double()
    s = NoiseSchedule(10)
    g = torch.Generator().manual_seed(2)
    z0 = torch.randn(1, 3, 32, 32, generator=g, dtype=torch.float64)
    noise = torch.randn(1, 3, 32, 32, generator=g, dtype=torch.float64)
    ctx = torch.randn(1, 3, 8, generator=g, dtype=torch.float64)
    site = model.sites["attn_mid.attn2.to_k"]
    pair = site.bank.emotion[6]
    with torch.no_grad():
        pair.B.normal_(0, 0.1)
    with model.routed("fear"):
        loss = ldm_loss(z0, ctx, 4, noise, model, s)
        loss.backward()
        analytic = pair.B.grad[1, 2].item()
        h = 1e-5
        with torch.no_grad():
            pair.B[1, 2] += h
            up = ldm_loss(z0, ctx, 4, noise, model, s).item()
            pair.B[1, 2] -= 2 * h
            down = ldm_loss(z0, ctx, 4, noise, model, s).item()
            pair.B[1, 2] += h
    numeric = (up - down) / (2 * h)
    assert abs(numeric - analytic) / max(abs(analytic), 1e-12) < 1e-4


@pytest.fixture(scope="module")
def net():
    torch.manual_seed(3)
    return ToyUNet(CFG)


def test_sampling_determinism(net):
    s = NoiseSchedule(10)
    ctx = torch.randn(2, 3, 16, generator=torch.Generator().manual_seed(0))
    a = sample(net, ctx, s, seed=[1, 2])
    b = sample(net, ctx, s, seed=[1, 2])
    assert torch.equal(a, b)
    c = sample(net, ctx, s, seed=[3, 4])
    assert (a - c).abs().max() > 0


def test_sampling_order_independent(net):
    s = NoiseSchedule(10)
    ctx = torch.randn(2, 3, 16, generator=torch.Generator().manual_seed(1))
    pair = sample(net, ctx, s, seed=[5, 6])
    single = sample(net, ctx[1:], s, seed=[6])
    assert torch.allclose(pair[1], single[0], atol=1e-5)


def test_respaced_sampling(net):
    s = NoiseSchedule(10)
    ts, betas = s.respaced(4)
    assert ts[0] == 0 and ts[-1] == 9 and len(ts) == 4
    assert ((betas > 0) & (betas < 1)).all()
    out = sample(net, torch.randn(1, 2, 16), s, steps=4, seed=0)
    assert out.shape == (1, 3, 32, 32) and out.abs().max() <= 1.0 + 1e-6


def test_guidance_one_is_conditional(net):
    x, t, ctx = torch.randn(1, 3, 32, 32), torch.tensor([3]), torch.randn(1, 2, 16)
    assert torch.equal(guided_eps(net, x, t, ctx, 1.0, null_context=torch.zeros(1, 2, 16)), net(x, t, ctx))
    with pytest.raises(ValueError):
        guided_eps(net, x, t, ctx, 2.0)


def test_zero_init_sampling_neutral(net):
    torch.manual_seed(3)
    base = ToyUNet(CFG)
    base.load_state_dict(net.state_dict())
    model = attach_to_denoiser(base)
    s = NoiseSchedule(10)
    ctx = torch.randn(1, 2, 16, generator=torch.Generator().manual_seed(9))
    with model.routed("disgust"):
        adapted = sample(model, ctx, s, seed=11)
    assert torch.allclose(adapted, sample(net, ctx, s, seed=11), atol=1e-6)
