"""Encoder, sequential generator (decoder + translator), critics and the
parallel two-GAN baseline.

Decoder and translator hold a reference to the *same* ``shared`` module, so
the first two upsampling layers have a single storage.
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

CHECKPOINT_FORMAT = 1


class DescriptorMismatch(RuntimeError):
    pass


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 64
    latent_dim: int = 128
    base_channels: int = 32  # channels of the last hidden upsampling layer
    enc_hidden: int = 512
    critic_channels: int = 32
    seed_size: int = 4  # spatial size of the map produced from z

    def __post_init__(self):
        n = self.image_size
        if n < 16 or n & (n - 1):
            raise ValueError(f"image_size must be a power of two >= 16, got {n}")
        if self.seed_size not in (2, 4) or n // self.seed_size < 8:
            raise ValueError(f"seed_size must be 2 or 4 and at most image_size/8, got {self.seed_size}")
        for name in ("latent_dim", "base_channels", "enc_hidden", "critic_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def n_up(self) -> int:
        """Number of resolution-doubling layers from the seed map."""
        return int(math.log2(self.image_size // self.seed_size))

    @property
    def up_channels(self) -> list[int]:
        # coarsest first, e.g. 64px / 32 -> [256, 128, 64, 32, 1]
        return [self.base_channels * 2 ** (self.n_up - 1 - i) for i in range(self.n_up)] + [1]

    def descriptor(self) -> str:
        return "seqgan-v1:" + ",".join(f"{k}={v}" for k, v in asdict(self).items())


def _up(cin, cout, last=False):
    layers = [nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1)]
    if last:
        layers.append(nn.Tanh())
    else:
        layers += [nn.InstanceNorm2d(cout, affine=True), nn.LeakyReLU(0.2)]
    return nn.Sequential(*layers)


def _down(cin, cout, norm=True):
    layers = [nn.Conv2d(cin, cout, 4, stride=2, padding=1)]
    if norm:
        layers.append(nn.InstanceNorm2d(cout, affine=True))
    layers.append(nn.LeakyReLU(0.2))
    return nn.Sequential(*layers)


def up_stack(cfg: NetConfig, start: int = 0) -> nn.Sequential:
    ch = cfg.up_channels
    return nn.Sequential(*[_up(ch[i], ch[i + 1], last=i == cfg.n_up - 1) for i in range(start, cfg.n_up)])


class Encoder(nn.Module):
    """Two strided convolutions, reshape, two fully connected layers."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        c = cfg.base_channels
        self.convs = nn.Sequential(_down(1, c, norm=False), _down(c, 2 * c, norm=False))
        flat = 2 * c * (cfg.image_size // 4) ** 2
        self.fc = nn.Sequential(nn.Linear(flat, cfg.enc_hidden), nn.LeakyReLU(0.2), nn.Linear(cfg.enc_hidden, cfg.latent_dim))

    def forward(self, x):
        return self.fc(self.convs(x).flatten(1))


class LatentHead(nn.Module):
    """FC projection of z to the seed feature map."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.c0 = cfg.up_channels[0]
        self.s0 = cfg.seed_size
        self.fc = nn.Linear(cfg.latent_dim, self.c0 * self.s0 ** 2)
        self.post = nn.Sequential(nn.InstanceNorm2d(self.c0, affine=True), nn.LeakyReLU(0.2))

    def forward(self, z):
        return self.post(self.fc(z).view(-1, self.c0, self.s0, self.s0))


class Decoder(nn.Module):
    """Plain z -> image decoder (used standalone by the parallel baseline)."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.head = LatentHead(cfg)
        self.ups = up_stack(cfg)

    def forward(self, z):
        return self.ups(self.head(z))


class SequentialGenerator(nn.Module):
    """Encoder F_enc, decoder F_dec and translator T with a shared block.

    Parameter blocks: ``encoder``, ``dec_head`` + ``dec_tail`` (decoder-only),
    ``shared`` (first two upsampling layers, owned once), ``trans_down`` +
    ``trans_tail`` (translator-only).
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        if cfg.n_up < 3:
            raise ValueError("need at least three upsampling layers so each modality keeps a private tail")
        self.cfg = cfg
        ch = cfg.up_channels
        self.encoder = Encoder(cfg)
        self.dec_head = LatentHead(cfg)
        self.shared = up_stack(cfg)[:2]
        self.dec_tail = up_stack(cfg, start=2)
        downs = [_down(1, ch[-2], norm=False)]
        for i in range(cfg.n_up - 1, 0, -1):
            downs.append(_down(ch[i], ch[i - 1]))
        self.trans_down = nn.Sequential(*downs)
        self.trans_tail = up_stack(cfg, start=2)

    # views -------------------------------------------------------------
    def decoder_view(self) -> nn.Sequential:
        return nn.Sequential(self.dec_head, self.shared, self.dec_tail)

    def translator_view(self) -> nn.Sequential:
        return nn.Sequential(self.trans_down, self.shared, self.trans_tail)

    # forward passes ----------------------------------------------------
    def encode(self, x):
        return self.encoder(x)

    def decode(self, z):
        return self.dec_tail(self.shared(self.dec_head(z)))

    def translate(self, x):
        return self.trans_tail(self.shared(self.trans_down(x)))

    def forward(self, z):
        fake1 = self.decode(z)
        return fake1, self.translate(fake1)

    def block_parameters(self) -> dict[str, list[nn.Parameter]]:
        return {
            "encoder": list(self.encoder.parameters()),
            "shared": list(self.shared.parameters()),
            "decoder_tail": list(self.dec_head.parameters()) + list(self.dec_tail.parameters()),
            "translator": list(self.trans_down.parameters()) + list(self.trans_tail.parameters()),
        }

    def synth_parameters(self) -> list[nn.Parameter]:
        """Decoder + translator parameters (everything but the encoder)."""
        b = self.block_parameters()
        return b["shared"] + b["decoder_tail"] + b["translator"]


class Critic(nn.Module):
    """Four strided convolutions then a linear scalar head; no normalisation."""

    def __init__(self, cfg: NetConfig, in_channels: int = 1):
        super().__init__()
        c = cfg.critic_channels
        chans = [in_channels, c, 2 * c, 4 * c, 8 * c]
        self.convs = nn.Sequential(*[_down(chans[i], chans[i + 1], norm=False) for i in range(4)])
        self.fc = nn.Linear(8 * c * max(cfg.image_size // 16, 1) ** 2, 1)

    def forward(self, x):
        return self.fc(self.convs(x).flatten(1)).squeeze(1)


class CriticPair(nn.Module):
    """D^1 and D^2; independent parameters, selected by modality slot (1 or 2)."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.d1 = Critic(cfg)
        self.d2 = Critic(cfg)

    def get(self, modality) -> Critic:
        if modality in (1, "1", "d1"):
            return self.d1
        if modality in (2, "2", "d2"):
            return self.d2
        raise KeyError(f"unknown critic modality {modality!r}")

    def score(self, modality, images):
        return self.get(modality)(images)


class ParallelGenerators(nn.Module):
    """Two structurally identical, independently initialised decoders fed a common z."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.g1 = Decoder(cfg)
        self.g2 = Decoder(cfg)

    def forward(self, z):
        return self.g1(z), self.g2(z)


# ---------------------------------------------------------------------------
# construction helpers


def _he_init(module: nn.Module):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, a=0.2, nonlinearity="leaky_relu")
            nn.init.zeros_(m.bias)


def _seeded(build, seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = build()
        _he_init(module)
    return module


def build_generator(cfg: NetConfig, seed: int) -> SequentialGenerator:
    return _seeded(lambda: SequentialGenerator(cfg), seed)


def build_critics(cfg: NetConfig, seed: int) -> CriticPair:
    # distinct stream from the generator built with the same master seed
    return _seeded(lambda: CriticPair(cfg), seed + 7919)


def build_parallel_baseline(cfg: NetConfig, seed: int) -> tuple[ParallelGenerators, CriticPair]:
    return _seeded(lambda: ParallelGenerators(cfg), seed), build_critics(cfg, seed)


def sample_latent(n: int, seed: int | None = None, latent_dim: int = 128, generator: torch.Generator | None = None):
    """n standard-normal latent vectors, shape (n, latent_dim)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if generator is None:
        generator = torch.Generator().manual_seed(seed if seed is not None else 0)
    return torch.randn(n, latent_dim, generator=generator)


def param_digest(module: nn.Module | list) -> str:
    """sha256 over parameter bytes; used for phase-partition checks."""
    params = module.parameters() if isinstance(module, nn.Module) else module
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, *, descriptor: str, modules: dict, optimizers: dict | None = None, iteration: int = 0,
                    seeds: dict | None = None, extra: dict | None = None):
    for name, m in modules.items():
        for k, v in m.state_dict().items():
            if v.is_floating_point() and not torch.isfinite(v).all():
                raise FloatingPointError(f"refusing to checkpoint non-finite tensor {name}.{k}")
    payload = {
        "format": CHECKPOINT_FORMAT,
        "descriptor": descriptor,
        "iteration": iteration,
        "seeds": seeds or {},
        "modules": {k: m.state_dict() for k, m in modules.items()},
        "optimizers": {k: o.state_dict() for k, o in (optimizers or {}).items()},
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class CorruptCheckpoint(ValueError):
    pass


def load_checkpoint(path, descriptor: str | None = None) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:  # torch surfaces truncation as several error types
        raise CorruptCheckpoint(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict):
        raise CorruptCheckpoint(f"{path}: not a checkpoint")
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise DescriptorMismatch(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
    if descriptor is not None and payload["descriptor"] != descriptor:
        raise DescriptorMismatch(f"{path}: checkpoint built for {payload['descriptor']!r}, expected {descriptor!r}")
    return payload


def net_config_from_descriptor(descriptor: str) -> NetConfig:
    kind, _, body = descriptor.partition(":")
    if kind != "seqgan-v1":
        raise DescriptorMismatch(f"unknown architecture descriptor {descriptor!r}")
    kv = dict(item.split("=") for item in body.split(","))
    return NetConfig(**{k: int(v) for k, v in kv.items()})
