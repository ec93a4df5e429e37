"""Shared fixtures-as-functions for the unit and acceptance suites."""

import numpy as np
import torch

from bimodal_gan import losses
from bimodal_gan.networks import NetConfig, build_critics, build_generator

TINY = NetConfig(image_size=16, latent_dim=8, base_channels=4, enc_hidden=16, critic_channels=4, seed_size=2)

# relative error uses max(|analytic|, |numeric|, REL_FLOOR) as denominator so
# parameters with vanishing gradient are judged on absolute error
REL_FLOOR = 1e-5


def _pick(params, k, rng):
    """k (tensor, flat index) probes spread over a block's parameter tensors."""
    out = []
    # weights only: biases feeding instance norm have identically zero gradient
    tensors = [p for p in params if p.dim() > 1]
    for i in range(k):
        p = tensors[(i * 7) % len(tensors)]
        out.append((p, int(rng.integers(p.numel()))))
    return out


def _fd(loss_fn, p, idx, eps=1e-6):
    flat = p.data.view(-1)
    orig = flat[idx].item()
    flat[idx] = orig + eps
    up = loss_fn().item()
    flat[idx] = orig - eps
    down = loss_fn().item()
    flat[idx] = orig
    return (up - down) / (2 * eps)


def gradient_probe(seed=0, cfg=TINY):
    """Analytic vs central-difference gradients of the reconstruction loss and
    the generator loss on 20 scalars spanning every block; float64 throughout.

    Returns a list of (label, analytic, numeric, relative error).
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    G = build_generator(cfg, seed).double()
    D = build_critics(cfg, seed).double()
    real1 = torch.rand(3, 1, cfg.image_size, cfg.image_size, dtype=torch.float64) * 2 - 1
    real2 = torch.rand(3, 1, cfg.image_size, cfg.image_size, dtype=torch.float64) * 2 - 1
    z = torch.randn(3, cfg.latent_dim, dtype=torch.float64)

    def recon():
        f1 = G.decode(G.encode(real1))
        return losses.recon_l1(real1, real2, f1, G.translate(f1)).value

    def unsup():
        f1, f2 = G(z)
        return losses.generator_unsup_loss(D, f1, f2).value

    blocks = G.block_parameters()
    plan = [
        ("recon/encoder", recon, blocks["encoder"], 3),
        ("recon/shared", recon, blocks["shared"], 2),
        ("recon/decoder_tail", recon, blocks["decoder_tail"], 2),
        ("recon/translator", recon, blocks["translator"], 2),
        ("unsup/shared", unsup, blocks["shared"], 2),
        ("unsup/decoder_tail", unsup, blocks["decoder_tail"], 2),
        ("unsup/translator", unsup, blocks["translator"], 2),
        ("unsup/critic1", unsup, list(D.d1.parameters()), 3),
        ("unsup/critic2", unsup, list(D.d2.parameters()), 2),
    ]
    rows = []
    for label, fn, params, k in plan:
        for p, idx in _pick(params, k, rng):
            G.zero_grad()
            D.zero_grad()
            fn().backward()
            analytic = p.grad.view(-1)[idx].item()
            with torch.no_grad():
                numeric = _fd(fn, p, idx)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)
            rows.append((label, analytic, numeric, rel))
    return rows
