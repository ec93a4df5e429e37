import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from bimodal_gan import losses
from bimodal_gan.networks import build_critics


class Linear(nn.Module):
    def __init__(self, w, b=0.0):
        super().__init__()
        self.w = nn.Parameter(torch.as_tensor(w, dtype=torch.float64))
        self.b = b

    def forward(self, x):
        return (x.flatten(1) * self.w).sum(1) + self.b


class Constant(nn.Module):
    def forward(self, x):
        return torch.full((x.shape[0],), 3.0, dtype=x.dtype)


def test_recon_examples():
    z = torch.zeros(2, 1, 4, 4)
    o = torch.ones(2, 1, 4, 4)
    assert losses.recon_l1(z, z, z, z).item() == 0
    assert losses.recon_l1(z, z, o, z).item() == pytest.approx(1.0)
    lv = losses.recon_l1(z, z, 0.5 * o, -o)
    assert lv.item() == pytest.approx(1.5)
    assert lv.components == {"l1_mod1": 0.5, "l1_mod2": 1.0}
    with pytest.raises(ValueError):
        losses.recon_l1(z, z, torch.zeros(2, 1, 8, 8), z)


def test_recon_is_batch_mean():
    rng = torch.Generator().manual_seed(0)
    r = torch.rand(8, 1, 4, 4, generator=rng)
    f = torch.rand(8, 1, 4, 4, generator=rng)
    whole = losses.recon_l1(r, r, f, f).item()
    halves = [losses.recon_l1(r[s], r[s], f[s], f[s]).item() for s in (slice(0, 4), slice(4, 8))]
    assert whole == pytest.approx(np.mean(halves))


def test_gp_linear_critic():
    rng = np.random.default_rng(0)
    for _ in range(20):
        w = rng.normal(size=16) * rng.uniform(0.1, 3)
        real = torch.rand(5, 1, 4, 4, dtype=torch.float64)
        fake = torch.rand(5, 1, 4, 4, dtype=torch.float64)
        gp = losses.gradient_penalty(Linear(w), real, fake, seed=1).item()
        assert gp == pytest.approx((np.linalg.norm(w) - 1) ** 2, abs=1e-5)


def test_gp_constant_critic_is_one():
    x = torch.rand(4, 1, 4, 4)
    assert losses.gradient_penalty(Constant(), x, x.flip(0), seed=0).item() == 1.0


def test_gp_unit_norm_linear_is_zero():
    w = np.zeros(16)
    w[3] = 1.0
    x = torch.rand(3, 1, 4, 4, dtype=torch.float64)
    assert losses.gradient_penalty(Linear(w), x, 1 - x, seed=0).item() == pytest.approx(0.0, abs=1e-12)


def test_gp_interpolation_is_per_example():
    u = losses.interpolation_weights(1000, seed=3)
    assert 0 <= u.min() and u.max() < 1
    assert abs(u.mean().item() - 0.5) < 0.03
    assert torch.equal(u, losses.interpolation_weights(1000, seed=3))


def test_critic_objective_examples():
    w = np.full(4, 0.5)  # norm 1: zero penalty
    real = torch.ones(2, 1, 2, 2, dtype=torch.float64)
    fake = torch.zeros(2, 1, 2, 2, dtype=torch.float64)
    lv = losses.critic_objective(Linear(w), real, fake, seed=0)
    assert lv.components["w_estimate"] == pytest.approx(2.0)
    assert lv.item() == pytest.approx(-2.0)
    with pytest.raises(ValueError):
        losses.critic_objective(Linear(w), real, fake, lam=-1)


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 50))
def test_critic_objective_linear_in_lambda(lam):
    torch.manual_seed(0)
    w = np.random.default_rng(1).normal(size=16)
    real = torch.rand(4, 1, 4, 4, dtype=torch.float64)
    fake = torch.rand(4, 1, 4, 4, dtype=torch.float64)
    u = torch.full((4,), 0.3, dtype=torch.float64)
    lv = losses.critic_objective(Linear(w), real, fake, lam=lam, u=u)
    expect = -(lv.components["w_estimate"] - lam * lv.components["penalty"])
    assert lv.item() == pytest.approx(expect, rel=1e-9, abs=1e-9)


def test_critic_objective_does_not_touch_fake_graph(tiny_net):
    D = build_critics(tiny_net, 0)
    fake = torch.rand(2, 1, 16, 16, requires_grad=True)
    lv = losses.critic_objective(D.d1, torch.rand(2, 1, 16, 16), fake, seed=0)
    lv.value.backward()
    assert fake.grad is None
    assert all(p.grad is not None for p in D.d1.parameters())


def test_generator_loss_components(tiny_net):
    D = build_critics(tiny_net, 0)
    f1, f2 = torch.rand(3, 1, 16, 16), torch.rand(3, 1, 16, 16)
    lv = losses.generator_unsup_loss(D, f1, f2)
    assert lv.components["w1_part"] == pytest.approx(-D.d1(f1).mean().item(), rel=1e-6)
    assert lv.components["w2_part"] == pytest.approx(-D.d2(f2).mean().item(), rel=1e-6)
    assert lv.item() == pytest.approx(lv.components["w1_part"] + lv.components["w2_part"], rel=1e-6)


def test_gp_finite_difference():
    # the penalty is differentiable in the critic weights (double backward)
    torch.manual_seed(0)
    critic = nn.Sequential(nn.Flatten(), nn.Linear(16, 8), nn.Tanh(), nn.Linear(8, 1)).double()
    real = torch.rand(3, 1, 4, 4, dtype=torch.float64)
    fake = torch.rand(3, 1, 4, 4, dtype=torch.float64)
    u = torch.tensor([0.2, 0.5, 0.9], dtype=torch.float64)
    p = critic[1].weight
    loss = lambda: losses.critic_objective(critic, real, fake, u=u).value
    critic.zero_grad()
    loss().backward()
    eps = 1e-6
    for idx in (0, 17, 63):
        with torch.no_grad():
            orig = p.view(-1)[idx].item()
            p.view(-1)[idx] = orig + eps
            up = loss().item()
            p.view(-1)[idx] = orig - eps
            down = loss().item()
            p.view(-1)[idx] = orig
        assert p.grad.view(-1)[idx].item() == pytest.approx((up - down) / (2 * eps), rel=1e-5, abs=1e-8)
