"""Reconstruction, critic (WGAN-GP) and generator objectives.

Every function returns a :class:`LossValue` whose ``value`` is a scalar
tensor (kept differentiable) and whose ``components`` are detached floats.
All reductions are batch means.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

LAMBDA_GP = 10.0


@dataclass
class LossValue:
    value: torch.Tensor
    components: dict[str, float] = field(default_factory=dict)

    def item(self) -> float:
        return float(self.value.detach())

    def record(self) -> dict[str, float]:
        return {"value": self.item(), **self.components}


def _as_batch(x):
    x = torch.as_tensor(x)
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[:, None]
    return x


def _score(critic, x):
    out = critic(x)
    return out.reshape(x.shape[0], -1).sum(1)


def recon_l1(real1, real2, fake1, fake2) -> LossValue:
    """Mean absolute error per image, summed over the two modalities, batch-averaged."""
    real1, real2, fake1, fake2 = map(_as_batch, (real1, real2, fake1, fake2))
    if real1.shape != fake1.shape or real2.shape != fake2.shape:
        raise ValueError(f"shape mismatch: {tuple(real1.shape)}/{tuple(fake1.shape)}, {tuple(real2.shape)}/{tuple(fake2.shape)}")
    l1 = (real1 - fake1).abs().mean()
    l2 = (real2 - fake2).abs().mean()
    value = l1 + l2
    return LossValue(value, {"l1_mod1": float(l1.detach()), "l1_mod2": float(l2.detach())})


def interpolation_weights(n: int, seed=None, generator: torch.Generator | None = None, dtype=torch.float32):
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    return torch.rand(n, generator=generator, dtype=dtype)


def _interpolates(real, fake, seed, generator, u):
    n = real.shape[0]
    if u is None:
        u = interpolation_weights(n, seed, generator, dtype=real.dtype)
    u = torch.as_tensor(u, dtype=real.dtype).view(n, *([1] * (real.dim() - 1)))
    return (u * real.detach() + (1 - u) * fake.detach()).requires_grad_(True)


def _penalty(out, x_hat, create_graph=True):
    grad = None
    if out.requires_grad:
        (grad,) = torch.autograd.grad(out.sum(), x_hat, create_graph=create_graph, allow_unused=True)
    if grad is None:  # critic ignores its input
        grad = torch.zeros_like(x_hat)
    norms = grad.flatten(1).norm(dim=1)
    return ((norms - 1) ** 2).mean(), norms


def gradient_penalty(critic, real, fake, seed=None, generator=None, u=None, create_graph=True) -> LossValue:
    """mean over the batch of (||grad_x D(x_hat)||_2 - 1)^2, x_hat = u*real + (1-u)*fake.

    ``u`` is drawn per example; pass it explicitly to pin the interpolation.
    """
    real, fake = _as_batch(real), _as_batch(fake)
    if real.shape != fake.shape:
        raise ValueError(f"real/fake batch shapes differ: {tuple(real.shape)} vs {tuple(fake.shape)}")
    # the penalty needs input gradients even when called under no_grad
    with torch.enable_grad():
        x_hat = _interpolates(real, fake, seed, generator, u)
        value, norms = _penalty(_score(critic, x_hat), x_hat, create_graph)
    return LossValue(value, {"penalty": float(value.detach()), "grad_norm": float(norms.mean().detach())})


def critic_objective(critic, real, fake, lam=LAMBDA_GP, seed=None, generator=None, u=None) -> LossValue:
    """Loss minimised by the critic: -(E D(real) - E D(fake) - lam * penalty)."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    real, fake = _as_batch(real), _as_batch(fake).detach()
    if real.shape[1:] != fake.shape[1:]:
        raise ValueError("real/fake image shapes differ")
    w = _score(critic, real).mean() - _score(critic, fake).mean()
    if lam > 0:
        gp = gradient_penalty(critic, real, fake, seed=seed, generator=generator, u=u)
        penalty = gp.value
    else:
        penalty = torch.zeros((), dtype=real.dtype)
    value = -(w - lam * penalty)
    return LossValue(value, {"w_estimate": float(w.detach()), "penalty": float(penalty.detach()),
                             "weighted_penalty": float(lam * penalty.detach())})


def generator_unsup_loss(critics, fake1, fake2) -> LossValue:
    """-E D1(fake1) - E D2(fake2); the real-data and penalty terms of the
    W estimates are constant in the generator parameters."""
    fake1, fake2 = _as_batch(fake1), _as_batch(fake2)
    w1 = -_score(critics.get(1), fake1).mean()
    w2 = -_score(critics.get(2), fake2).mean()
    return LossValue(w1 + w2, {"w1_part": float(w1.detach()), "w2_part": float(w2.detach())})
